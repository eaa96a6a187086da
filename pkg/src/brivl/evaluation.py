"""Retrieval and zero-shot evaluation over embedding spaces.

Retrieval ranks candidates by dot product (descending, ties broken by
candidate index); zero-shot classification assigns each item the class
whose encoded name has the highest cosine similarity.  All functions are
pure over immutable inputs.
"""

from dataclasses import dataclass

import numpy as np

RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str  # "image->text" or "text->image"
    recall_at: dict  # k -> percentage
    recall_sum: float  # sum of all six recalls across both directions

    def lines(self) -> list:
        out = [f"{self.direction} recall@{k} = {self.recall_at[k]:.2f}%"
               for k in sorted(self.recall_at)]
        out.append(f"recall_sum = {self.recall_sum:.2f}%")
        return out


@dataclass
class ZeroShotReport:
    class_names: list
    per_class_accuracy: dict  # name -> percentage
    overall_accuracy: float  # percentage
    confusion: np.ndarray  # (true, predicted) counts

    def lines(self) -> list:
        out = [f"overall accuracy = {self.overall_accuracy:.2f}%"]
        for name in self.class_names:
            out.append(f"class {name}: {self.per_class_accuracy[name]:.2f}%")
        return out


def _ranks_of_best_match(scores: np.ndarray, truth: dict) -> np.ndarray:
    """For each query row, the rank (0-based) of its best ground-truth hit.

    Candidates are ordered by score descending; equal scores keep
    ascending candidate index (stable sort on the negated scores).
    """
    n_queries, n_candidates = scores.shape
    ranks = np.empty(n_queries, dtype=np.int64)
    for q in range(n_queries):
        matches = truth[q]
        if not matches:
            raise ValueError(f"query {q} has no ground-truth match")
        order = np.argsort(-scores[q], kind="stable")
        pos = np.flatnonzero(np.isin(order, list(matches)))
        ranks[q] = pos[0]
    return ranks


def _recalls(ranks: np.ndarray) -> dict:
    return {k: 100.0 * float((ranks < k).mean()) for k in RECALL_KS}


def retrieval_eval(
    image_embeddings: np.ndarray,
    text_embeddings: np.ndarray,
    truth_i2t: dict,
    truth_t2i: dict,
) -> tuple:
    """Both retrieval directions scored by dot product.

    ``truth_i2t`` maps image index to the set of matching text indices,
    ``truth_t2i`` the reverse.  Returns (image->text, text->image) reports
    sharing one recall_sum.
    """
    if max(RECALL_KS) > text_embeddings.shape[0]:
        raise ValueError(
            f"recall@{max(RECALL_KS)} needs at least {max(RECALL_KS)} text candidates"
        )
    if max(RECALL_KS) > image_embeddings.shape[0]:
        raise ValueError(
            f"recall@{max(RECALL_KS)} needs at least {max(RECALL_KS)} image candidates"
        )
    scores = image_embeddings @ text_embeddings.T
    i2t = _recalls(_ranks_of_best_match(scores, truth_i2t))
    t2i = _recalls(_ranks_of_best_match(scores.T, truth_t2i))
    total = float(sum(i2t.values()) + sum(t2i.values()))
    return (
        RetrievalReport("image->text", i2t, total),
        RetrievalReport("text->image", t2i, total),
    )


def identity_truth(n: int) -> dict:
    return {i: {i} for i in range(n)}


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    return x / norms


def zero_shot_classify(
    item_embeddings: np.ndarray,
    item_labels: list,
    class_names: list,
    encode_texts,
) -> ZeroShotReport:
    """Assign each item the argmax-cosine class among encoded class names.

    ``encode_texts`` maps a list of strings to an (n, d) embedding array;
    class names are encoded exactly once.
    """
    if len(class_names) < 2:
        raise ValueError("zero-shot classification needs at least two classes")
    if len(set(class_names)) != len(class_names):
        raise ValueError("duplicate class names")
    if len(item_labels) != item_embeddings.shape[0]:
        raise ValueError("one label per item embedding required")
    class_emb = np.asarray(encode_texts(list(class_names)))
    sims = _unit_rows(item_embeddings) @ _unit_rows(class_emb).T
    predicted = sims.argmax(axis=1)
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    n_classes = len(class_names)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for label, pred in zip(item_labels, predicted):
        confusion[name_to_idx[label], pred] += 1
    per_class = {}
    for name, i in name_to_idx.items():
        total = confusion[i].sum()
        per_class[name] = 100.0 * confusion[i, i] / total if total else 0.0
    overall = 100.0 * float(np.trace(confusion)) / max(len(item_labels), 1)
    return ZeroShotReport(list(class_names), per_class, overall, confusion)


def topk_text_neighbors(query: str, candidates: list, k: int, encode_texts) -> list:
    """Rank candidate texts against the query by embedding cosine.

    Returns [(candidate index, text, cosine)] of length k, best first.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    emb = np.asarray(encode_texts([query] + list(candidates)))
    emb = _unit_rows(emb)
    sims = emb[1:] @ emb[0]
    order = np.argsort(-sims, kind="stable")[:k]
    return [(int(i), candidates[int(i)], float(sims[int(i)])) for i in order]


# ---------------------------------------------------------------------------
# report emission


def report_text(reports) -> str:
    """Aligned plain-text rendering of one or more reports."""
    lines = []
    for r in reports:
        lines.extend(r.lines())
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def report_kv(reports) -> str:
    """Machine-readable key=value rendering."""
    pairs = []
    for r in reports:
        if isinstance(r, RetrievalReport):
            tag = "i2t" if r.direction == "image->text" else "t2i"
            for k in sorted(r.recall_at):
                pairs.append((f"{tag}.recall@{k}", f"{r.recall_at[k]:.4f}"))
            pairs.append(("recall_sum", f"{r.recall_sum:.4f}"))
        elif isinstance(r, ZeroShotReport):
            pairs.append(("zeroshot.overall", f"{r.overall_accuracy:.4f}"))
            for name in r.class_names:
                pairs.append(
                    (f"zeroshot.class.{name}", f"{r.per_class_accuracy[name]:.4f}")
                )
    seen = set()
    lines = []
    for key, value in pairs:
        if key not in seen:
            seen.add(key)
            lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
