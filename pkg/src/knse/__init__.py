"""Knowledge-aware prompt-based symptom status recognition in medical dialogues."""

from .corpus import Dialogue, DialogueWindow, SplitMode, SplitSpec, Status, SymptomCatalog
from .encoder import EncoderConfig, Vocab
from .matcher import KNSEModel
from .training import SSRSettings, StatusClassifier, TrainConfig

__version__ = "0.1.0"

__all__ = ["Dialogue", "DialogueWindow", "SplitMode", "SplitSpec", "Status", "SymptomCatalog", "EncoderConfig",
           "Vocab", "KNSEModel", "SSRSettings", "StatusClassifier", "TrainConfig"]
