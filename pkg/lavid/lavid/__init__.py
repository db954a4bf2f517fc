"""lavid package namespace.

Training-free detection of AI-generated videos with a large vision-language
model: explicit-knowledge tools turn frames into extra views, a reference set
picks the tools that help, response templates adapt online, and per-tool
verdicts are OR-ensembled.
"""

__version__ = "0.1.0"
