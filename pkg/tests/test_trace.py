"""注意力日志与剪枝轨迹的读写测试"""

import json

import numpy as np
import pandas as pd
import pytest


def sample_trace():
    from prune_ast.config import Aggregation, PruneMetric
    from prune_ast.trace import PruneStep, PruneTrace

    steps = [
        PruneStep(
            block=1,
            metric=PruneMetric.ATTN_MP,
            retained=np.array([0, 2, 3]),
            pruned=np.array([1]),
            retained_scores=np.array([0.3, 0.4, 0.2]),
            pruned_scores=np.array([0.1]),
        ),
        PruneStep(
            block=2,
            metric=PruneMetric.ATTN_MP,
            retained=np.array([0, 3]),
            pruned=np.array([2]),
            retained_scores=np.array([0.5, 0.3]),
            pruned_scores=np.array([0.2]),
        ),
    ]
    return PruneTrace(
        metric=PruneMetric.ATTN_MP,
        keep_rate=0.6,
        locations=(1, 2),
        aggregation=Aggregation.MEAN_POOLING,
        n_tokens=4,
        n_time=2,
        n_freq=2,
        content_frames=32,
        steps=steps,
    )


def discard_trace():
    """block 1 后丢弃 provenance 1，block 2 的 TopK 在剩下的 3 个 token 上保留 2 个"""
    from prune_ast.config import DiscardGroup
    from prune_ast.trace import DiscardStep

    trace = sample_trace()
    trace.locations = (2,)
    trace.keep_rate = 0.5
    trace.steps = trace.steps[1:]
    trace.discard = DiscardStep(block=1, group=DiscardGroup.L, retained=np.array([0, 2, 3]), pruned=np.array([1]))
    return trace


class TestAttentionLog:
    def test_frame_columns(self):
        from prune_ast.trace import LOG_COLUMNS, AttentionLog

        log = AttentionLog()
        log.add(1, np.array([0, 1, 2]), np.array([0.2, 0.3, 0.5]))
        log.add(2, np.array([0, 2]), np.array([0.6, 0.4]), np.array([True, False]))
        frame = log.to_frame()
        assert list(frame.columns) == LOG_COLUMNS
        assert len(log) == 5
        assert log.blocks() == [1, 2]
        assert frame["retained_flag"].tolist() == [1, 1, 1, 1, 0]

    def test_empty_frame(self):
        from prune_ast.trace import LOG_COLUMNS, AttentionLog

        frame = AttentionLog().to_frame()
        assert list(frame.columns) == LOG_COLUMNS
        assert frame.empty

    def test_csv_round_trip(self, tmp_path):
        from prune_ast.trace import AttentionLog

        log = AttentionLog()
        log.add(3, np.array([5, 7]), np.array([0.125, 0.875]), np.array([False, True]))
        log.write_csv(tmp_path / "a.attn.csv")
        back = AttentionLog.read_csv(tmp_path / "a.attn.csv").to_frame()
        pd.testing.assert_frame_equal(back, log.to_frame())

    def test_missing_column(self, tmp_path):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import AttentionLog

        (tmp_path / "bad.csv").write_text("block,provenance,score\n1,0,0.5\n", encoding="utf-8")
        with pytest.raises(TraceFormatError):
            AttentionLog.read_csv(tmp_path / "bad.csv")

    def test_non_integer_block(self, tmp_path):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import AttentionLog

        (tmp_path / "bad.csv").write_text("block,provenance,score,retained_flag\nx,0,0.5,1\n", encoding="utf-8")
        with pytest.raises(TraceFormatError):
            AttentionLog.read_csv(tmp_path / "bad.csv")


class TestPruneTrace:
    def test_validate_ok(self):
        sample_trace().validate()

    def test_final_retained_and_pruned_at(self):
        trace = sample_trace()
        assert trace.final_retained().tolist() == [0, 3]
        assert trace.pruned_at().tolist() == [0, 1, 2, 0]
        assert trace.step_at(2).before == 3
        assert trace.step_at(5) is None

    def test_no_steps(self):
        trace = sample_trace()
        trace.steps = []
        assert trace.final_retained().tolist() == [0, 1, 2, 3]
        assert trace.pruned_at().tolist() == [0, 0, 0, 0]

    def test_json_round_trip(self, tmp_path):
        from prune_ast.trace import PruneTrace

        trace = sample_trace()
        trace.write_json(tmp_path / "t.trace.json")
        back = PruneTrace.read_json(tmp_path / "t.trace.json")
        assert back.to_dict() == trace.to_dict()
        data = json.loads((tmp_path / "t.trace.json").read_text(encoding="utf-8"))
        assert data["format_version"] == 1
        assert data["steps"][0]["retained"] == [0, 2, 3]

    def test_overlap_rejected(self):
        from prune_ast.errors import TraceFormatError

        trace = sample_trace()
        trace.steps[0].pruned = np.array([2])
        with pytest.raises(TraceFormatError):
            trace.validate()

    def test_wrong_keep_count_rejected(self):
        from prune_ast.errors import TraceFormatError

        trace = sample_trace()
        trace.keep_rate = 0.9
        with pytest.raises(TraceFormatError):
            trace.validate()

    def test_chain_break_rejected(self):
        """第二步的 R ∪ P 必须等于第一步的 R"""
        from prune_ast.errors import TraceFormatError

        trace = sample_trace()
        trace.steps[1].pruned = np.array([1])
        with pytest.raises(TraceFormatError):
            trace.validate()

    def test_version_rejected(self):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import PruneTrace

        data = sample_trace().to_dict()
        data["format_version"] = 99
        with pytest.raises(TraceFormatError):
            PruneTrace.from_dict(data)

    def test_grid_mismatch_rejected(self):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import PruneTrace

        data = sample_trace().to_dict()
        data["n_time"] = 3
        with pytest.raises(TraceFormatError):
            PruneTrace.from_dict(data)

    def test_missing_field_rejected(self):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import PruneTrace

        data = sample_trace().to_dict()
        del data["steps"][0]["pruned_scores"]
        with pytest.raises(TraceFormatError):
            PruneTrace.from_dict(data)

    def test_unreadable_json(self, tmp_path):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import PruneTrace

        (tmp_path / "x.trace.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(TraceFormatError):
            PruneTrace.read_json(tmp_path / "x.trace.json")


class TestDiscardInTrace:
    """分组丢弃记录与 TopK 步骤的衔接"""

    def test_validate_and_chain(self):
        from prune_ast.trace import DiscardStep, PruneStep

        trace = discard_trace()
        trace.validate()
        assert [type(e) for e in trace.events()] == [DiscardStep, PruneStep]
        assert trace.final_retained().tolist() == [0, 3]
        assert trace.pruned_at().tolist() == [0, 1, 2, 0]

    def test_step_without_discard_breaks_chain(self):
        from prune_ast.errors import TraceFormatError

        trace = discard_trace()
        trace.discard = None
        with pytest.raises(TraceFormatError):
            trace.validate()

    def test_mismatched_discard_rejected(self):
        from prune_ast.errors import TraceFormatError

        trace = discard_trace()
        trace.discard.pruned = np.array([], dtype=np.int64)
        with pytest.raises(TraceFormatError):
            trace.validate()

    def test_discard_after_topk_in_same_block(self):
        """同一 block 内先 TopK 后丢弃"""
        from prune_ast.config import DiscardGroup
        from prune_ast.trace import DiscardStep, PruneStep

        trace = sample_trace()
        trace.discard = DiscardStep(block=1, group=DiscardGroup.H, retained=np.array([0, 3]), pruned=np.array([2]))
        trace.steps = trace.steps[:1]
        trace.validate()
        assert [type(e) for e in trace.events()] == [PruneStep, DiscardStep]
        assert trace.final_retained().tolist() == [0, 3]

    def test_json_round_trip(self, tmp_path):
        from prune_ast.trace import PruneTrace

        trace = discard_trace()
        trace.write_json(tmp_path / "d.trace.json")
        back = PruneTrace.read_json(tmp_path / "d.trace.json")
        assert back.to_dict() == trace.to_dict()
        assert back.discard.retained.tolist() == [0, 2, 3]
        data = json.loads((tmp_path / "d.trace.json").read_text(encoding="utf-8"))
        assert data["discard"] == {"block": 1, "group": "L", "retained": [0, 2, 3], "pruned": [1]}

    def test_plain_trace_has_no_discard_key(self):
        assert "discard" not in sample_trace().to_dict()

    def test_bad_group_rejected(self):
        from prune_ast.errors import TraceFormatError
        from prune_ast.trace import PruneTrace

        data = discard_trace().to_dict()
        data["discard"]["group"] = "M"
        with pytest.raises(TraceFormatError):
            PruneTrace.from_dict(data)
