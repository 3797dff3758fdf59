"""Human-in-the-loop TAMER workbench with counterfactual feedback."""

__version__ = "0.1.0"
