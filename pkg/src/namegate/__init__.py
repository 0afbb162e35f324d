"""Word naming verification over precomputed encoder embeddings.

An audio-text matching head scored against natural-language prompts, plus a
classifier baseline and a CTC transcription baseline, with a
leave-one-speaker-out evaluation harness and a synthetic dataset generator
for desk-scale experiments.
"""

__version__ = "0.1.0"
