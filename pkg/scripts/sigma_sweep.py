"""Coverage, length and MSE across sigma in {1, 2, 5, 10} with p=10 and Gaussian noise."""

from _runner import run_preset

if __name__ == "__main__":
    run_preset("sigma_sweep", __doc__)
