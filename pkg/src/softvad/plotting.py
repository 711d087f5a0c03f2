"""Report figures (written to files, never shown)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}


def plot_lambda_sweep(rows, path, reference=None):
    """EER (left axis) and VAD AUC (right axis) against the loss weight."""
    lams = [r["lam"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(lams, [r["eer_percent"] for r in rows], "o-", color="tab:blue", label="EER")
        ax.set_xlabel(r"loss weight $\lambda$")
        ax.set_ylabel("EER (%)", color="tab:blue")
        ax2 = ax.twinx()
        aucs = [r["auc_percent"] for r in rows]
        if any(a is not None for a in aucs):
            ax2.plot(lams, [float("nan") if a is None else a for a in aucs], "s--",
                     color="tab:red", label="AUC")
        ax2.set_ylabel("VAD AUC (%)", color="tab:red")
        if reference:
            best = reference["best_auc"]
            text = (f"reference: AUC {best['auc_percent']}% at $\\lambda$={best['lam']}; "
                    f"EER {reference['best_eer']['eer_percent']}% at "
                    f"$\\lambda$={reference['best_eer']['lam']}")
            fig.text(0.01, 0.01, text, fontsize=6, color="0.4")
        fig.tight_layout(rect=(0, 0.04, 1, 1))
        fig.savefig(path)
        plt.close(fig)


def plot_history(history, path, keys=("L_JL", "L_SP", "L_v", "L_s")):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for k in keys:
            pts = [(r["step"], r[k]) for r in history if r.get(k) is not None]
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, label=k)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
