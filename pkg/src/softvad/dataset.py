"""Loading corpus utterances as feature matrices, windows and frame labels."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from softvad import corpus, features


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    feats: np.ndarray              # (T, 40), mean-normalized
    labels: np.ndarray | None = None
    context: int = 5

    @property
    def num_frames(self):
        return self.feats.shape[0]

    @property
    def windows(self):
        return features.context_windows(self.feats, self.context).astype(np.float32)


def load_utterance(manifest: corpus.CorpusManifest, rec: corpus.UtteranceRecord,
                   context=5, cache_dir=None, with_labels=True) -> Utterance:
    cache = Path(cache_dir) / f"{rec.utterance_id}.f32" if cache_dir else None
    if cache is not None and cache.is_file():
        feats = features.read_feature_cache(cache)
    else:
        audio = manifest.resolve(rec.audio_path)
        if not Path(audio).is_file():
            raise FileNotFoundError(f"{rec.utterance_id}: audio file {audio} not found")
        feats = features.extract(corpus.read_wav(audio))
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            features.write_feature_cache(cache, feats)
            feats = features.read_feature_cache(cache)
    labels = None
    if with_labels and rec.label_path:
        path = manifest.resolve(rec.label_path)
        if Path(path).is_file():
            labels = corpus.read_labels(path)
            if len(labels) != feats.shape[0]:
                raise ValueError(f"{rec.utterance_id}: {len(labels)} labels for "
                                 f"{feats.shape[0]} feature frames")
    return Utterance(rec.utterance_id, rec.speaker_id, feats, labels, context)


def load_split(manifest: corpus.CorpusManifest, *splits, context=5, cache=True):
    """Load every utterance of the given splits (all splits when none given)."""
    recs = manifest.select(*splits) if splits else list(manifest)
    cache_dir = manifest.root / "feats" if (cache and manifest.root is not None) else None
    return [load_utterance(manifest, r, context, cache_dir) for r in recs]


def speaker_index(utterances):
    return {s: i for i, s in enumerate(sorted({u.speaker_id for u in utterances}))}
