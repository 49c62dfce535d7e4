import logging

import numpy as np

from app.encoders import encode, featurize_text
from app.errors import ContractError
from app.pool import captions_for, top_k
from app.state import EpisodeState


logger = logging.getLogger(__name__)


class RetrieveNode:
    """Initial top-k retrieval over the cached pool embeddings with the base text tower."""

    def run(self, state: EpisodeState) -> EpisodeState:
        cfg = state["config"]
        pool = state["pool"]
        if pool.count < cfg.k:
            raise ContractError(f"pool has {pool.count} items but k={cfg.k}")

        if state.get("query_embedding") is None:
            text = state.get("query_text")
            if text is None:
                raise ContractError("an episode needs query text or a query embedding")
            text_tower = state["model"].text
            embedded = encode(text_tower, featurize_text(text, text_tower.d_in))
            state["query_embedding"] = embedded.data.astype(np.float32)

        pre = top_k(pool, state["query_embedding"], pool.count, workers=state.get("workers", 1))
        top = pre.head(cfg.k)
        state["pre_ranking"] = pre
        state["top_ids"] = list(top.ids)
        state["top_rows"] = top.rows
        state["captions"] = captions_for(pool, top.ids)
        logger.debug("Retrieved top-%s for query %s", cfg.k, state["query_id"])
        return state
