"""Reference-guided visual grounding: few-shot instance detection over a
template database plus LLM-based matching of referring expressions."""

__version__ = "0.1.0"
