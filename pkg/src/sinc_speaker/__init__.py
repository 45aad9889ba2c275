"""sinc-speaker - speaker recognition from raw waveforms with learnable sinc filters and margin losses."""

__version__ = "0.1.0"
