"""Shared test support: a rule-driven fake LLM backend and tiny corpora."""

import datetime as dt
import json
import re

from autoct.llm import BackendError, LlmBackend
from autoct.retrieval import Document, ingest


class RuleBackend(LlmBackend):
    """Deterministic fake: the first rule whose marker appears in the request
    transcript produces the response. Responders are pure functions of the
    request, so concurrent callers and replays see identical outputs."""

    def __init__(self, rules):
        # rules: list of (marker, responder); responder(request, transcript) -> str
        self.rules = list(rules)

    def complete(self, request):
        transcript = request.system + "\n" + "\n".join(content for _, content in request.messages)
        for marker, responder in self.rules:
            if marker in transcript:
                out = responder(request, transcript)
                if out is not None:
                    return out
        raise BackendError(f"no rule matched request: {transcript[:160]!r}")


def observation_count(transcript: str) -> int:
    return transcript.count("Observation:")


def extract_nct_id(transcript: str) -> str:
    match = re.search(r"NCT\d+", transcript)
    return match.group(0) if match else ""


def const(value) -> callable:
    text = value if isinstance(value, str) else json.dumps(value)
    return lambda request, transcript: text


def pubmed_doc(doc_id, text, date):
    return Document(doc_id=doc_id, source="pubmed", title=f"article {doc_id}", body=text, date=dt.date.fromisoformat(date))


def nct_doc(nct_id, text, date, doc_id=None):
    return Document(
        doc_id=doc_id or f"reg-{nct_id}",
        source="nct",
        title=f"registration {nct_id}",
        body=text,
        date=dt.date.fromisoformat(date),
        nct_id=nct_id,
    )


def small_indices():
    pubmed = ingest(
        [
            pubmed_doc("p1", "aspirin cardiac outcomes cohort", "2001-05-01"),
            pubmed_doc("p2", "vaccine immunogenicity dose response", "2004-02-11"),
            pubmed_doc("p3", "oncology phase results toxicity", "2009-08-30"),
            pubmed_doc("p4", "post hoc analysis of the subject trial", "2019-01-01"),
        ]
    )
    nct = ingest(
        [
            nct_doc("NCT0000001", "oncology trial single dose", "2002-03-03"),
            nct_doc("NCT0000002", "cardiac trial with placebo", "2006-06-06"),
            nct_doc("NCT0000009", "subject trial registration record", "2010-01-01"),
            nct_doc("NCT0000010", "later trial should never surface", "2015-09-09"),
        ]
    )
    return pubmed, nct
