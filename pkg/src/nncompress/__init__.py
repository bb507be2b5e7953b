"""Neural-network compression toolkit: magnitude pruning, low-rank conv factorization
and knowledge distillation over a small numpy training engine."""

__version__ = "0.1.0"
