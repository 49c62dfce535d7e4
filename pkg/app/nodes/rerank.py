import numpy as np

from app.encoders import featurize_text
from app.nodes.towers import candidate_images, tower_embed
from app.pool import rank_rows
from app.state import EpisodeState
from app.tensor import row_dot


class RerankNode:
    """Re-encodes the candidates and the query with the adapted towers and re-ranks the top-k candidates."""

    def run(self, state: EpisodeState) -> EpisodeState:
        pool = state["pool"]
        rows = state["top_rows"]
        images = candidate_images(state, rows).data.astype(np.float32)

        text = state.get("query_text")
        if text is None:
            query = state["query_embedding"]
        else:
            features = featurize_text(text, state["model"].text.d_in).values.reshape(1, -1)
            query = tower_embed(state, "text", features).data[0].astype(np.float32)

        state["post_ranking"] = rank_rows(pool, rows, row_dot(images, query))
        return state
