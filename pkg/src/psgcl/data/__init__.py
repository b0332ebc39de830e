"""Recording ingestion, clip segmentation, splits and the synthetic generator."""
from .clips import ClipBatch, preprocess, resample, segment_clips
from .corpus import ClipCorpus, build_corpus
from .recording import MissingChannel, RawRecording, load_recording
from .splits import SPLITS, ManifestRow, read_manifest, split_participants, write_manifest
from .synth import SynthParams, synthesize_recording

__all__ = ["ClipBatch", "preprocess", "resample", "segment_clips", "ClipCorpus", "build_corpus",
           "MissingChannel", "RawRecording", "load_recording", "SPLITS", "ManifestRow", "read_manifest",
           "split_participants", "write_manifest", "SynthParams", "synthesize_recording"]
