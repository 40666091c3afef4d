"""Selected-frame overlays: energy heatmap with vertical markers at voted frames."""
import numpy as np


def selection_record(entry, diag, mask):
    """JSON-ready description of one utterance's voting decisions."""
    blocks = []
    for i, sel in enumerate(diag.selections):
        blocks.append({
            "block": i + 1,
            "indices": list(sel.indices),
            "votes": sel.score_map.votes.astype(int).tolist(),
            "enhanced": sel.score_map.enhanced.tolist(),
        })
    cross = diag.cross_selection
    return {
        "utt_id": entry.utt_id,
        "label": entry.label,
        "num_frames": diag.num_frames,
        "artifact_mask": [int(m) for m in mask] if entry.label == "spoof" else [],
        "blocks": blocks,
        "cross_block": None if cross is None else {
            "indices": list(cross.indices),
            "votes": cross.score_map.votes.astype(int).tolist(),
            "enhanced": cross.score_map.enhanced.tolist(),
        },
    }


def render_overlay(record, activation, path, subframes_per_frame):
    """Write a PNG: log-energy heatmap of the first frontend layer with red lines at the
    final block's selected frames, and one selection strip per block underneath."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    T = record["num_frames"]
    energy = np.log10(np.square(activation[:T * subframes_per_frame]).T + 1e-6)
    n_blocks = len(record["blocks"])
    fig, (ax, strip) = plt.subplots(2, 1, figsize=(8, 4), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    ax.imshow(energy, aspect="auto", origin="lower", cmap="Greys", extent=(0, T, 0, energy.shape[0]))
    if record["artifact_mask"]:
        for t, m in enumerate(record["artifact_mask"]):
            if m:
                ax.axvspan(t, t + 1, color="cyan", alpha=0.25, lw=0)
    if record["blocks"]:
        for i in record["blocks"][-1]["indices"]:
            ax.axvline(i + 0.5, color="red", lw=2.0)
    ax.set_ylabel("channel")
    ax.set_title(f"{record['utt_id']} ({record['label']})")
    grid = np.zeros((max(n_blocks, 1), T))
    for b in record["blocks"]:
        grid[b["block"] - 1, b["indices"]] = 1
    strip.imshow(grid, aspect="auto", origin="lower", cmap="Reds", extent=(0, T, 0.5, n_blocks + 0.5),
                 vmin=0, vmax=1)
    strip.set_ylabel("block")
    strip.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
