"""Transfer-learning classifiers, a stacking ensemble and CPU-vs-GPU training benchmarks
for two-class (ASD / TD) face images."""

__version__ = "0.1.0"
