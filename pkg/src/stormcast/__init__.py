"""Lightning nowcasting from optical-flow extrapolation errors with a residual UNet++."""

__version__ = "0.1.0"
