"""Multi-task convolutional networks with stochastic gain comodulation."""

__version__ = "0.1.0"
