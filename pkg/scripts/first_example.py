"""Coverage, length and test MSE of naive, CART and RRT(c), c = 1..5, on n=200, p=5, sigma=2."""

from _runner import run_preset

if __name__ == "__main__":
    run_preset("first_example", __doc__)
