"""Shared test configuration.

Property tests run derandomised so the suite is reproducible run to run;
deadlines are disabled because several properties assemble meshes, which
makes individual examples slow on loaded machines.
"""

from hypothesis import HealthCheck, settings

settings.register_profile(
    "reproducible",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("reproducible")
