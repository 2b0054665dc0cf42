"""Macro-F1 at window and song level, multi-run summaries, embedding dumps."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, read_json, write_json


class EvaluationError(ValueError):
    pass


def per_class_prf(predictions, labels, classes) -> dict[int, tuple[float, float, float]]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = {}
    for c in classes:
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = int(np.sum((predictions != c) & (labels == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out[int(c)] = (p, r, f)
    return out


def macro_f1(predictions, labels, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over classes seen in labels or predictions.

    A class with P + R = 0 scores 0.  ``num_classes`` only bounds-checks.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise EvaluationError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise EvaluationError("macro_f1 of an empty set")
    if num_classes is not None:
        for arr in (predictions, labels):
            if arr.min() < 0 or arr.max() >= num_classes:
                raise EvaluationError(f"class index out of range [0, {num_classes})")
    classes = sorted(set(labels.tolist()) | set(predictions.tolist()))
    scores = per_class_prf(predictions, labels, classes)
    return float(np.mean([f for _, _, f in scores.values()]))


def song_level_predict(window_preds, window_probs, tracks) -> dict:
    """Majority vote of window predictions per track.

    Ties go to the tied class with the higher mean softmax probability over
    the track's windows, then to the lower class index.
    """
    groups = defaultdict(list)
    for i, t in enumerate(tracks):
        groups[t].append(i)
    probs = np.asarray(window_probs) if window_probs is not None else None
    preds = np.asarray(window_preds)
    out = {}
    for t, idx in groups.items():
        if not idx:
            raise EvaluationError(f"track {t} has no windows")
        votes = Counter(preds[idx].tolist())
        top = max(votes.values())
        tied = sorted(c for c, v in votes.items() if v == top)
        if len(tied) > 1 and probs is not None:
            mean_p = probs[idx].mean(axis=0)
            tied.sort(key=lambda c: (-mean_p[c], c))
        out[t] = int(tied[0])
    return out


@dataclass
class EvalReport:
    window_macro_f1: float
    song_macro_f1: float
    per_class: dict = field(default_factory=dict)  # class -> [precision, recall, f1] (song level)
    seed: int | None = None
    n_windows: int = 0
    n_songs: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): list(v) for k, v in self.per_class.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class"] = {int(k): tuple(v) for k, v in d.get("per_class", {}).items()}
        return cls(**d)


def evaluate_predictions(probs, labels, tracks, seed=None) -> EvalReport:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    preds = probs.argmax(axis=1)
    song_pred = song_level_predict(preds, probs, tracks)
    song_true = {}
    for t, y in zip(tracks, labels.tolist()):
        song_true.setdefault(t, y)
    keys = list(song_pred)
    sp = np.array([song_pred[k] for k in keys])
    st = np.array([song_true[k] for k in keys])
    classes = sorted(set(st.tolist()) | set(sp.tolist()))
    return EvalReport(
        window_macro_f1=macro_f1(preds, labels),
        song_macro_f1=macro_f1(sp, st),
        per_class=per_class_prf(sp, st, classes),
        seed=seed,
        n_windows=len(labels),
        n_songs=len(keys),
    )


def average_runs(reports) -> dict:
    """Mean ("F1/avg") and max ("F1/best") song-level macro-F1 across runs."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("average_runs needs at least one report")
    song = [r.song_macro_f1 for r in reports]
    window = [r.window_macro_f1 for r in reports]
    return {
        "f1_avg": float(np.mean(song)),
        "f1_best": float(np.max(song)),
        "window_f1_avg": float(np.mean(window)),
        "window_f1_best": float(np.max(window)),
        "runs": len(reports),
        "seeds": [r.seed for r in reports],
    }


def save_report(path, report: EvalReport) -> None:
    write_json(path, report.to_dict())


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(read_json(path))


# embedding dumps -----------------------------------------------------------

DOMAIN_TAG = {"target": 0, "source": 1}


def write_embedding_dump(path, embeddings, labels, predictions, domains) -> int:
    """One line per window: ``e1,e2,...<TAB>label<TAB>prediction<TAB>domain``.

    Domain tags are 1 for source and 0 for target; unlabeled windows carry -1.
    """
    lines = []
    for emb, y, p, d in zip(embeddings, labels, predictions, domains):
        tag = DOMAIN_TAG[d] if isinstance(d, str) else int(d)
        if tag not in (0, 1):
            raise EvaluationError(f"domain tag must be 0 or 1, got {tag}")
        y = -1 if y is None else int(y)
        lines.append(",".join(repr(float(v)) for v in emb) + f"\t{y}\t{int(p)}\t{tag}")
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def read_embedding_dump(path):
    embs, labels, preds, domains = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            e, y, p, d = line.rstrip("\n").split("\t")
            embs.append([float(v) for v in e.split(",")])
            labels.append(int(y))
            preds.append(int(p))
            domains.append(int(d))
    return np.array(embs), np.array(labels), np.array(preds), np.array(domains)


def plot_embedding_dump(dump_path, image_path, seed: int = 0, perplexity: float = 30.0) -> Path:
    """2-D t-SNE scatter of a dump, coloured by domain (0 target, 1 source)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    embs, labels, _, domains = read_embedding_dump(dump_path)
    perplexity = min(perplexity, max(1.0, (len(embs) - 1) / 3))
    xy = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(embs)
    fig, ax = plt.subplots(figsize=(6, 6))
    for tag, colour in ((1, "tab:orange"), (0, "tab:blue")):
        m = domains == tag
        ax.scatter(xy[m, 0], xy[m, 1], s=8, c=colour, label=f"{tag} ({'source' if tag else 'target'})")
    ax.legend()
    ax.set_xticks([])
    ax.set_yticks([])
    image_path = Path(image_path)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(image_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return image_path
