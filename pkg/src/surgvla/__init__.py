"""Toy-scale surgical vision-language assistant pipeline.

Submodules: encoding (visual features), contrastive (stage-1 alignment),
conversation (round assembly and masking), language_model (toy decoder),
training (two-stage optimization and checkpoints), datagen (instruction data
from captions), datasets (surgical VQA loaders and synthetic fixtures),
evaluation (judge scoring, VQA accuracy, ablation), cli (entry point).
"""

__version__ = "0.1.0"
