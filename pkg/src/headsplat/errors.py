"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` and a ``context`` dict so the
CLI can emit a structured envelope; ``exit_code`` follows the CLI contract
(2 = invalid input or config, 3 = runtime failure).
"""

from __future__ import annotations


class HeadsplatError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_code = 3

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def envelope(self) -> dict:
        return {"code": self.code, "message": self.message, "context": self.context}


class MeshParseError(HeadsplatError):
    """Malformed mesh, mask, or blendshape file; context names file/line/offset."""

    code = "mesh-parse"
    exit_code = 2


class ShapeMismatchError(HeadsplatError):
    """Array dimensions disagree with the declared contract."""

    code = "shape-mismatch"
    exit_code = 2


class TopologyError(HeadsplatError):
    """Mesh connectivity violates a precondition (non-manifold edge, bad index)."""

    code = "topology"
    exit_code = 2


class ConfigError(HeadsplatError):
    """Invalid configuration value or schema violation."""

    code = "config"
    exit_code = 2


class RenderError(HeadsplatError):
    """Renderer precondition failure (non-finite parameters, bad pose)."""

    code = "render"
    exit_code = 3


class GuidanceError(HeadsplatError):
    """Diffusion-guidance failure (non-finite latent, bad timestep)."""

    code = "guidance"
    exit_code = 3


class TrainingError(HeadsplatError):
    """Optimization diverged or produced non-finite parameters."""

    code = "training"
    exit_code = 3
