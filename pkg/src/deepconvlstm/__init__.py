"""DeepConvLSTM training engine and experiment harness for sensor-based HAR."""

__version__ = "0.1.0"
