"""Sigma sweep with Laplace noise of matching variance."""

from _runner import run_preset

if __name__ == "__main__":
    run_preset("laplace", __doc__)
