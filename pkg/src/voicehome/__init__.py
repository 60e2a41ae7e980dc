"""Pre-deployment realism and readiness harness for in-home voice pipelines."""

__version__ = "0.1.0"
