"""Full-reference speech quality prediction with a siamese CNN-BiLSTM in numpy."""

__version__ = "0.1.0"
