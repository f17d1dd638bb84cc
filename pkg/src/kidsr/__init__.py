"""Text-independent speaker recognition for children's speech.

Sub-band and full-band MFCC front-ends, GMM-UBM and GMM-supervector SVM
back-ends, and verification / identification harnesses.
"""

__version__ = "0.1.0"
