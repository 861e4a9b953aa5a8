# Coupled-watermark lab - embed, attack and verify model-stealing-resistant watermarks
__version__ = "0.1.0"
