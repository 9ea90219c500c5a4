from __future__ import annotations

import json
from pathlib import Path

import pytest

from tripletforge.gateway import BackendDescriptor, BackendKind, Gateway
from tripletforge.records import (
    DedupStatus,
    GenerationProvenance,
    GenMethod,
    QuestionRecord,
    SubsetTag,
)

FIXTURES = Path(__file__).parent / "fixtures"


def make_question(
    qid: str = "q_0000000000000001",
    subset: SubsetTag = SubsetTag.LEETCODE,
    text: str = "Write a function that sums a list of integers.",
    dedup_status: DedupStatus = DedupStatus.PENDING,
) -> QuestionRecord:
    return QuestionRecord(
        id=qid,
        subset=subset,
        text=text,
        provenance=GenerationProvenance(
            method=GenMethod.SEED_ASSESSMENT,
            seed_ids=("s1", "s2", "s3"),
            model_id="mock-model",
            prompt_hash="ab" * 32,
        ),
        created_at="2024-01-01T00:00:00Z",
        dedup_status=dedup_status,
    )


@pytest.fixture
def mock_gateway_factory(tmp_path):
    """Builds a Gateway with mock backends; fixtures given as dicts."""

    def build(roles: dict[str, dict] | None = None, mode: str = "generative") -> Gateway:
        descriptors = {}
        for role, fixture_data in (roles or {"question_gen": {}}).items():
            path = tmp_path / f"{role}_fixtures.json"
            path.write_text(json.dumps(fixture_data), encoding="utf-8")
            descriptors[role] = BackendDescriptor(
                kind=BackendKind.MOCK,
                model_id=f"mock-{role}",
                fixtures=str(path),
                mock_mode=mode,
            )
        return Gateway(descriptors)

    return build
