"""Set-theoretic ellipsoidal receding-horizon control for highway overtaking."""

__version__ = "0.1.0"
