"""Query-based multi-track rearrangement of symbolic music."""
from .features import AuxFeatures, TrackFunction, aux_features, mixture_function, track_function
from .instruments import InstrumentVocab, default_vocab
from .networks import ModelConfig, QandA
from .rearrange import ReferenceDB, RearrangeOptions, orchestrate, rearrange, search_reference
from .score import Mixture, Segment, TrackRoll, condense_mixture, ingest_midi, segments_to_midi
from .training import ScheduleConfig, TrainConfig, load_checkpoint, save_checkpoint, step_schedule, train
from .voicesep import QandAV, assign_mixture_notes, separate_voices

__version__ = "0.1.0"
