"""splatact: depth-supervised Gaussian scene tokens driving a reasoning
decoder and a flow-matching action head, at desk scale on synthetic tabletop
scenes."""

__version__ = "0.1.0"
