"""Unpaired spectrogram-to-spectrogram voice conversion on numpy.

Subpackages:
  audio      WAV I/O and magnitude-spectrogram analysis
  autodiff   reverse-mode tape over numpy arrays
  nn         parameter init, Adam, spectral normalization
  converter  cycle-consistent adversarial spectrogram converter
  vocoder    autoregressive recurrent vocoder with a Gaussian output head
  training   data sampling, training loops, checkpoints
  reference  independent brute-force oracles used for verification
  cli        command-line pipeline driver
"""

__version__ = "0.1.0"
