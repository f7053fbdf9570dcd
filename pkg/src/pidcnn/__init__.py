"""PID convolutional network for binocular 3D motion estimation of a moving ball."""

__version__ = "0.1.0"
