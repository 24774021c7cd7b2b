"""Backdoor and adversarial-input defenses evaluated against trained models."""
from .cleanse import (AnomalyReport, CleanseResult, TriggerEstimate, adaptive_neural_cleanse,
                      anomaly_index, blend, load_cleanse_result, neural_cleanse, save_cleanse_result,
                      scan_classes)
from .smoothing import CertificationResult, SmoothingConfig, certified_accuracy, certify
from .strip import (StripVerdict, e_strip, strip_calibrate, strip_decide, strip_entropy,
                    write_verdicts)

__all__ = [
    "AnomalyReport", "CertificationResult", "CleanseResult", "SmoothingConfig", "StripVerdict",
    "TriggerEstimate", "adaptive_neural_cleanse", "anomaly_index", "blend", "certified_accuracy",
    "certify", "e_strip", "load_cleanse_result", "neural_cleanse", "save_cleanse_result",
    "scan_classes", "strip_calibrate", "strip_decide", "strip_entropy", "write_verdicts",
]
