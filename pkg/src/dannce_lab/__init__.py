"""Domain-generalization lab: HΔH geometry, adversarial training, cooperative examples."""

__version__ = "0.1.0"
