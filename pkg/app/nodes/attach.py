import logging

import numpy as np

from app.encoders import fnv1a_64, featurize_texts
from app.lora import attach
from app.optim import AdamW
from app.state import EpisodeState, Tower


logger = logging.getLogger(__name__)

_MASK64 = 0xFFFFFFFFFFFFFFFF


def episode_seed(global_seed: int, query_id: str) -> int:
    """Depends on the query id only, never on execution order."""
    return (global_seed ^ fnv1a_64(query_id.encode("utf-8"))) & _MASK64


def tower_seed(seed: int, tower: Tower) -> int:
    return fnv1a_64(f"{seed}:{tower}".encode("utf-8"))


class AttachNode:
    """Pairs candidates with their captions and attaches fresh adapters (or trainable copies)."""

    def run(self, state: EpisodeState) -> EpisodeState:
        cfg = state["config"]
        pool = state["pool"]
        model = state["model"]

        caption_features, degenerate = featurize_texts(state["captions"], model.text.d_in)
        keep = ~degenerate
        if np.any(degenerate):
            logger.warning(
                "Query %s: %s empty caption(s) left out of adaptation",
                state["query_id"],
                int(degenerate.sum()),
            )
        state["train_rows"] = state["top_rows"][keep]
        state["caption_features"] = caption_features[keep]

        towers: list[Tower] = [t for t in ("vision", "text") if cfg.lora.adapts(t)]
        if "vision" in towers and not pool.has_features:
            logger.debug("Pool has no image features; only the text tower adapts")
            towers.remove("vision")
        state["towers"] = towers

        seed = episode_seed(cfg.seed, state["query_id"])
        state["episode_seed"] = seed
        params = []
        if state.get("full_tuning"):
            state["trainable"] = {
                tower: getattr(model, tower).layer_tensors(requires_grad=True) for tower in towers
            }
            for tower in towers:
                for weight, bias in state["trainable"][tower]:
                    params.extend([weight, bias])
        else:
            state["adapters"] = {
                tower: attach(getattr(model, tower), cfg.lora, tower_seed(seed, tower), tower)
                for tower in towers
            }
            for tower in towers:
                params.extend(state["adapters"][tower].parameters())

        state["optimizer"] = AdamW(params, cfg.optimizer)
        state["epoch"] = 0
        state["loss_trace"] = []
        state["loss_after"] = None
        state["skipped"] = int(keep.sum()) < 2 or not params
        state["aborted"] = False
        state["error"] = ""
        return state
