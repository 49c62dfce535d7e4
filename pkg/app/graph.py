import logging

from langgraph.graph import END, START, StateGraph

from app.nodes.adapt import AdaptNode
from app.nodes.attach import AttachNode
from app.nodes.rerank import RerankNode
from app.nodes.reset import ResetNode
from app.nodes.retrieve import RetrieveNode
from app.state import EpisodeState


logger = logging.getLogger(__name__)


def _route_after_attach(state: EpisodeState) -> str:
    if state.get("skipped"):
        logger.debug("Route(attach): rerank (nothing to adapt) query=%s", state["query_id"])
        return "rerank"
    return "adapt"


def _route_after_adapt(state: EpisodeState) -> str:
    if state.get("aborted"):
        logger.debug("Route(adapt): reset (aborted) query=%s", state["query_id"])
        return "reset"
    if state["epoch"] < state["config"].epochs:
        return "adapt"
    return "rerank"


def build_episode_graph(
    retrieve_node: RetrieveNode | None = None,
    attach_node: AttachNode | None = None,
    adapt_node: AdaptNode | None = None,
    rerank_node: RerankNode | None = None,
    reset_node: ResetNode | None = None,
):
    """retrieve -> attach -> adapt (x epochs) -> rerank -> reset."""
    graph = StateGraph(EpisodeState)

    retrieve = retrieve_node or RetrieveNode()
    attach = attach_node or AttachNode()
    adapt = adapt_node or AdaptNode()
    rerank = rerank_node or RerankNode()
    reset = reset_node or ResetNode()

    graph.add_node("retrieve", retrieve.run)
    graph.add_node("attach", attach.run)
    graph.add_node("adapt", adapt.run)
    graph.add_node("rerank", rerank.run)
    graph.add_node("reset", reset.run)

    graph.add_edge(START, "retrieve")
    graph.add_edge("retrieve", "attach")
    graph.add_conditional_edges(
        "attach",
        _route_after_attach,
        {
            "adapt": "adapt",
            "rerank": "rerank",
        },
    )
    graph.add_conditional_edges(
        "adapt",
        _route_after_adapt,
        {
            "adapt": "adapt",
            "rerank": "rerank",
            "reset": "reset",
        },
    )
    graph.add_edge("rerank", "reset")
    graph.add_edge("reset", END)

    return graph.compile()
