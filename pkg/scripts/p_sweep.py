"""Coverage, length and MSE across p in {5, 10, 20} with sigma=2."""

from _runner import run_preset

if __name__ == "__main__":
    run_preset("p_sweep", __doc__)
