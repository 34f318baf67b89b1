from typing import Any, Literal, TypedDict


class DecisionRecord(TypedDict):
    tick: int
    time: float
    provenance: Literal["base", "llm_par", "llm_unc", "emergency"]
    queries_used: int
    rationale: str
    predicted_aggregate: float
    selected_aggregate: float
    predicted_scores: dict[str, float]
    degraded: bool


class TranscriptRecord(TypedDict):
    request: dict[str, Any]
    response: str
    latency_ms: float
    timestamp: str
