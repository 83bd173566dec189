"""Vision-tactile-language-action pipeline at desk scale."""

__version__ = "0.1.0"

BUILD_ID = f"vtla-{__version__}"
