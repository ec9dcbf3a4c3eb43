"""Multi-source ensemble for ICD10 category prediction with confidence triage."""

__version__ = "0.1.0"

MODALITIES = ("lab", "medications", "radiology", "admission")
