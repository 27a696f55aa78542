import itertools
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapp.annotation import (
    API_KEY_ENV,
    AnnotationError,
    AnnotatorConfig,
    ChannelDoc,
    Criterion,
    FallbackAnnotator,
    LabelParseError,
    LLMAnnotator,
    LLMConfig,
    OracleAnnotator,
    PromptTemplate,
    ReplayAnnotator,
    aggregate_mode,
    behaviour_template,
    build_annotator,
    labels_to_triples,
    map_label,
    oracle_annotate,
    pair_hash,
    parse_label_list,
    render_prompt,
)
from lapp.preference_model import TrajectorySegment


def gait_segment(rate, length=24, dt=0.05, offset=0.0, command=1.0, velocity=1.0):
    """Segment whose four feet step at ``rate`` Hz with duty factor 0.6."""
    t = np.arange(length) * dt
    phase = np.mod(rate * t[:, None] + offset + np.array([0.0, 0.25, 0.5, 0.75]), 1.0)
    contacts = (phase < 0.6).astype(float)
    return TrajectorySegment(
        {
            "commands": np.full(length, command),
            "base_linear_velocity": np.column_stack([np.full(length, velocity), np.zeros(length), np.zeros(length)]),
            "base_angular_velocity": np.zeros((length, 3)),
            "base_height": np.full(length, 0.33),
            "base_roll_pitch_yaw": np.zeros((length, 3)),
            "feet_contacts": contacts,
        },
        np.zeros((length, 5)),
    )


def test_parse_example_list():
    assert parse_label_list("[0, 0, 1, 2, 3]", 5) == [0, 0, 1, 2, 3]
    assert parse_label_list("Answer: [1,0,2,2,1] because...", 5) == [1, 0, 2, 2, 1]


@pytest.mark.parametrize(
    "reply,pattern",
    [("Sure! [1,0]", "expected 5"), ("[0, 4, 1, 2, 3]", "range"), ("no list here", "no bracketed")],
)
def test_parse_errors(reply, pattern):
    with pytest.raises(LabelParseError, match=pattern):
        parse_label_list(reply, 5)


def test_aggregate_mode_rules():
    assert aggregate_mode([0] * 9 + [1] * 6) == 0
    assert aggregate_mode([0] * 7 + [1] * 7 + [2]) == 2
    assert aggregate_mode([3] * 15) == 3
    with pytest.raises(ValueError):
        aggregate_mode([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=15), st.randoms())
def test_aggregate_mode_order_invariant(samples, rnd):
    shuffled = list(samples)
    rnd.shuffle(shuffled)
    assert aggregate_mode(shuffled) == aggregate_mode(samples)


def test_map_label():
    assert map_label(0) == 0.0 and map_label(1) == 1.0 and map_label(2) == 0.5 and map_label(3) is None


def test_label_accounting():
    segs = [gait_segment(2.0 + i * 0.1) for i in range(6)]
    pairs = list(zip(segs[:3], segs[3:])) * 2
    outcome = labels_to_triples(pairs, [0, 3, 1, 2, 3, 0])
    assert len(outcome.triples) + outcome.discarded == outcome.annotated == 6
    assert outcome.discarded == 2
    assert [t.label for t in outcome.triples] == [0.0, 1.0, 0.5, 0.0]


def test_oracle_rules():
    fast, slow = gait_segment(4.0), gait_segment(2.0)
    crit = [Criterion("cadence", 1.0)]
    assert oracle_annotate((fast, slow), crit, 0.1) == 0
    assert oracle_annotate((slow, fast), crit, 0.1) == 1
    assert oracle_annotate((fast, fast), crit, 0.1) == 2


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.5, 5.0), st.floats(0.0, 1.0), st.floats(0.0, 0.5))
def test_oracle_antisymmetry(ra, rb, offset, tol):
    a, b = gait_segment(ra, offset=offset), gait_segment(rb)
    crit = [Criterion("cadence", 1.0), Criterion("sync_error", -1.0)]
    forward, backward = oracle_annotate((a, b), crit, tol), oracle_annotate((b, a), crit, tol)
    assert {forward, backward} in ({0, 1}, {2})
    assert forward != 3


def test_oracle_schedule_switches_with_stage():
    fast, slow = gait_segment(4.0), gait_segment(2.0)
    ann = OracleAnnotator([Criterion("cadence", 1.0)], schedule={0: [Criterion("cadence", 1.0)], 2: [Criterion("cadence", -1.0)]})
    assert ann.label_pairs([(fast, slow)]) == [0]
    ann.set_stage(2)
    assert ann.label_pairs([(fast, slow)]) == [1]


def template():
    return behaviour_template("high_cadence", horizon=24)


def test_prompt_rendering():
    pairs = [(gait_segment(2.0 + i), gait_segment(3.0)) for i in range(5)]
    text = render_prompt(template(), pairs)
    assert text == render_prompt(template(), pairs)
    assert text.count("Trajectory 0:") + text.count("Trajectory 1:") == 10
    # the embedded example reply parses back to the example labels
    assert parse_label_list(text, 5) == [0, 0, 1, 2, 3]


def test_prompt_precision_and_missing_channel():
    seg = gait_segment(2.0)
    seg.channels["commands"][0] = 1.23456
    tpl = PromptTemplate("$task $horizon $channel_docs $criteria $batch_size $example", "t", [ChannelDoc("commands", "c")], [])
    assert "1.235" in tpl.user_text([(seg, seg)])
    bad = PromptTemplate("x", "t", [ChannelDoc("joint_torque", "c")], [])
    with pytest.raises(KeyError, match="joint_torque"):
        bad.user_text([(seg, seg)])


def test_pair_hash_is_order_sensitive_and_stable():
    a, b = gait_segment(2.0), gait_segment(3.0)
    assert pair_hash(a, b) == pair_hash(gait_segment(2.0), gait_segment(3.0))
    assert pair_hash(a, b) != pair_hash(b, a)
    assert len(pair_hash(a, b)) == 16


def test_replay_annotator(tmp_path):
    a, b = gait_segment(2.0), gait_segment(3.0)
    path = tmp_path / "labels.jsonl"
    path.write_text(json.dumps({"pair_hash": pair_hash(a, b), "label": 1}) + "\n")
    ann = ReplayAnnotator.from_file(path)
    assert ann.label_pairs([(a, b)]) == [1]
    with pytest.raises(AnnotationError):
        ann.label_pairs([(b, a)])


class StubServer:
    """Local HTTP endpoint replying with scripted texts in order."""

    def __init__(self, replies):
        self.replies = itertools.cycle(replies) if not callable(replies) else None
        self.fn = replies if callable(replies) else None
        self.lock = threading.Lock()
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append((body, self.headers.get("Authorization")))
                    reply = stub.fn(len(stub.requests)) if stub.fn else next(stub.replies)
                data = reply.encode() if isinstance(reply, str) and reply.startswith("RAW:") else json.dumps({"text": reply}).encode()
                if data.startswith(b"RAW:"):
                    data = data[4:]
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/preference"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def five_pairs():
    return [(gait_segment(2.0 + 0.1 * i), gait_segment(3.0)) for i in range(5)]


def test_llm_constant_replies():
    with StubServer(["[0,0,0,0,0]"]) as stub:
        ann = LLMAnnotator(template(), LLMConfig(base_url=stub.url, samples=15, max_in_flight=4))
        assert ann.label_pairs(five_pairs()) == [0] * 5
        assert len(stub.requests) == 15
        body = stub.requests[0][0]
        assert set(body) == {"system", "user", "temperature"} and body["temperature"] > 0


def test_llm_majority_of_alternating_replies():
    # 15 sequential samples alternate 0/1 starting with 0 -> eight 0s, seven 1s
    replies = lambda n: "[0,0,0,0,0]" if n % 2 == 1 else "[1,1,1,1,1]"
    with StubServer(replies) as stub:
        ann = LLMAnnotator(template(), LLMConfig(base_url=stub.url, samples=15, max_in_flight=1))
        labels = ann.label_pairs(five_pairs())
        served = [replies(n) for n in range(1, len(stub.requests) + 1)]
    assert len(served) == 15 and served.count("[0,0,0,0,0]") == 8
    assert labels == [0] * 5


def test_llm_retries_after_garbage():
    replies = lambda n: "I cannot decide" if n == 1 else "[1, 0, 2, 3, 1]"
    with StubServer(replies) as stub:
        ann = LLMAnnotator(template(), LLMConfig(base_url=stub.url, samples=3, max_in_flight=1))
        assert ann.label_pairs(five_pairs()) == [1, 0, 2, 3, 1]
        assert len(stub.requests) == 4
        assert ann.failed_samples == 0


def test_llm_substitutes_ties_after_exhausting_retries():
    replies = lambda n: "RAW:not json" if n <= 3 else "[0,0,0,0,0]"
    with StubServer(replies) as stub:
        ann = LLMAnnotator(template(), LLMConfig(base_url=stub.url, samples=3, max_retries=2, max_in_flight=1))
        # first sample fails three times -> [2]*5; two good samples of 0 -> mode 0
        assert ann.label_pairs(five_pairs()) == [0] * 5
        assert ann.failed_samples == 1


def test_llm_sends_bearer_token(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret-token")
    with StubServer(["[0,0,0,0,0]"]) as stub:
        LLMAnnotator(template(), LLMConfig(base_url=stub.url, samples=1)).label_pairs(five_pairs())
        assert stub.requests[0][1] == "Bearer secret-token"


def test_llm_unreachable_raises_and_fallback_uses_oracle():
    cfg = LLMConfig(base_url="http://127.0.0.1:9/unreachable", samples=1, max_retries=1, timeout=1.0)
    ann = LLMAnnotator(template(), cfg)
    pairs = [(gait_segment(4.0), gait_segment(2.0))]
    with pytest.raises(AnnotationError):
        ann.label_pairs(pairs)
    fb = FallbackAnnotator(ann, OracleAnnotator([Criterion("cadence", 1.0)]))
    assert fb.label_pairs(pairs) == [0]


def test_build_annotator_backends(tmp_path):
    assert isinstance(build_annotator(AnnotatorConfig()), OracleAnnotator)
    path = tmp_path / "l.jsonl"
    path.write_text("")
    assert isinstance(build_annotator(AnnotatorConfig(backend="replay", replay_path=str(path))), ReplayAnnotator)
    llm = build_annotator(AnnotatorConfig(backend="llm", fallback_to_oracle=True, llm={"samples": 3}))
    assert isinstance(llm, FallbackAnnotator) and llm.primary.config.samples == 3
    with pytest.raises(ValueError):
        AnnotatorConfig(backend="other")
