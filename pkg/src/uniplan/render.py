import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .helpers.logging import get_logger  # noqa: E402
from .pipeline_sim import BACKWARD, FORWARD, trace_frame  # noqa: E402

logger = get_logger("render")

PHASE_COLORS = {FORWARD: "skyblue", BACKWARD: "lightgreen"}


def strategy_tag(strategy):
    """dp2-tp1-fsdp style tag of a strategy dict."""
    tag = f"dp{strategy['dp']}-tp{strategy['tp']}"
    return tag + "-fsdp" if strategy.get("fsdp") else tag


def stage_map(document):
    """One line per stage: the layers it holds and each layer's strategy."""
    rows = [[] for _ in range(document.deg)]
    for u, s, k in zip(document.layer_ids, document.stage_of, document.strategy_of):
        if 0 <= s < document.deg:
            rows[s].append(f"{u}:{strategy_tag(document.strategies[k])}")

    width = len(str(document.deg - 1))
    lines = [
        f"deg={document.deg} c={document.c} B={document.mini_batch} "
        f"est_tpi={document.est_tpi:.6g} s"
    ]
    for i, row in enumerate(rows):
        lines.append(f"stage {i:>{width}} | " + (" ".join(row) if row else "(empty)"))
    return "\n".join(lines) + "\n"


def raw_matrices(document):
    """P and S as 0/1 rows, one line per layer."""
    n_strats = len(document.strategies)
    lines = ["layer  P  S"]
    for u, s, k in zip(document.layer_ids, document.stage_of, document.strategy_of):
        p_row = "".join("1" if i == s else "0" for i in range(document.deg))
        s_row = "".join("1" if j == k else "0" for j in range(n_strats))
        lines.append(f"{u}  {p_row}  {s_row}")
    return "\n".join(lines) + "\n"


def gantt_rows(trace):
    return list(trace.resources)


def gantt_svg(trace, title=None):
    """SVG Gantt chart of an EventTrace, one row per stage and boundary."""
    matplotlib.rcParams["svg.hashsalt"] = "uniplan"
    frame = trace_frame(trace)
    rows = gantt_rows(trace)
    # first resource on top
    position = {name: len(rows) - 1 - idx for idx, name in enumerate(rows)}

    fig, ax = plt.subplots(figsize=(10, 0.6 * len(rows) + 1.2))
    for _, event in frame.iterrows():
        ax.barh(
            position[event["resource"]],
            event["end_s"] - event["start_s"],
            left=event["start_s"],
            color=PHASE_COLORS.get(event["phase"], "lightgrey"),
            edgecolor="black",
        )
        ax.text(
            event["start_s"],
            position[event["resource"]],
            str(event["micro_batch"]),
            va="center",
            ha="left",
            fontsize=7,
        )

    ax.set_yticks([position[name] for name in rows])
    ax.set_yticklabels(rows)
    ax.set_xlabel("Time (s)")
    ax.set_title(title or f"GPipe schedule, makespan {trace.makespan_s:.6g} s")
    ax.grid(True, axis="x", linestyle="--", alpha=0.7)
    fig.tight_layout()

    sink = io.StringIO()
    fig.savefig(sink, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug(f"Rendered Gantt with {len(rows)} rows and {len(frame)} events")
    return sink.getvalue()
