"""Multi-object tracking with a Kalman filter whose noise is learned from ego speed."""
__version__ = "0.1.0"
