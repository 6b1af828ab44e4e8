"""Desk-scale audio-visual speech recognition toolkit.

Library layout:

- ``corpus``    synthetic audio-visual data, normalization, SpecAugment masking
- ``gmmhmm``    monophone GMM-HMM training and Viterbi forced alignment
- ``autodiff``  reverse-mode automatic differentiation over numpy float64
- ``nn``        parameterized layers (attention, convolutions, norms)
- ``frontend``  audio/visual input stems and the exact 4x temporal upsampler
- ``encoder``   conformer blocks and the four fusion architectures
- ``decoder``   transformer decoder (single or dual memory) and language model
- ``losses``    CTC, attention NLL, joint loss, frame-classification CE
- ``training``  optimizer, LR schedule, staged pre-train/fine-tune pipeline
- ``decoding``  joint CTC/attention beam search, LM fusion, CER, ROVER
- ``config``    experiment configuration, presets, hashing
- ``cli``       subcommand front door for the whole recipe
"""

__version__ = "0.1.0"
