"""Edge-cloud LLM pipeline exploration and SLO-aware runtime path selection."""

__version__ = "0.1.0"
