from .server import BackendConfig, MaskedLMScorer, serve

__all__ = ["BackendConfig", "MaskedLMScorer", "serve"]
