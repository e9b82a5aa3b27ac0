import os
import logging
from typing import Dict, List, Optional

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from evaluation.cross_validation import CvReport
from regression.fit_engine import EffectTable, FittedZtpsRegression
from utils.data_io import write_table


class ReportGenerator:
    """Writes fit, effect, prediction and cross-validation outputs to a directory"""

    def __init__(self, out_dir: str, fingerprint: str, template_dir: Optional[str] = None):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.out_dir = out_dir
        self.fingerprint = fingerprint

        # Set template directory
        if template_dir is None:
            template_dir = os.path.join(
                os.path.dirname(os.path.abspath(__file__)),
                "templates"
            )

        self.env = Environment(
            loader=FileSystemLoader(template_dir),
            autoescape=False,
            keep_trailing_newline=True,
        )
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_table(self, frame: pd.DataFrame, name: str, index: bool = True) -> str:
        path = write_table(frame, self.path(name), self.fingerprint, index=index)
        self.logger.info(f"Wrote {path}")
        return path

    def totals_table(self, fitted: FittedZtpsRegression) -> pd.DataFrame:
        totals = fitted.totals
        records = [{"part": "global", "loglik": fitted.global_fit.loglik, "aic": fitted.global_fit.aic,
                    "bic": fitted.global_fit.bic, "n_params": fitted.global_fit.n_params}]
        for node, fit in fitted.node_fits.items():
            records.append({"part": fitted.tree.node_name(node), "loglik": fit.loglik, "aic": fit.aic,
                            "bic": fit.bic, "n_params": fit.n_params})
        records.append({"part": "total", "loglik": totals.loglik, "aic": totals.aic,
                        "bic": totals.bic, "n_params": totals.n_params})
        return pd.DataFrame(records)

    def render_fit_summary(self, fitted: FittedZtpsRegression,
                           template_name: str = "fit_summary.md.j2") -> str:
        selection = fitted.selection_table()
        nodes = []
        for row in selection.to_dict("records"):
            row["model"] = row["family"] if row["zi_side"] == "none" else f"{row['family']} + ZI {row['zi_side']}"
            nodes.append(row)
        context = {
            "fingerprint": self.fingerprint,
            "n_leaves": fitted.tree.n_leaves,
            "covariates": fitted.covariate_names,
            "global_label": fitted.global_fit.spec.label(),
            "global_loglik": fitted.global_fit.loglik,
            "global_params": fitted.global_fit.n_params,
            "totals": fitted.totals,
            "nodes": nodes,
            "flagged": fitted.flagged_nodes,
        }
        return self.env.get_template(template_name).render(**context)

    def write_fit_outputs(self, fitted: FittedZtpsRegression, effects: EffectTable) -> Dict[str, str]:
        """Selection table, totals, effects, coefficient table and the summary"""
        written = {
            "selection": self.write_table(fitted.selection_table(), "selection.csv", index=False),
            "totals": self.write_table(self.totals_table(fitted), "totals.csv", index=False),
            "effects": self.write_effects(effects),
            "coefficients": self.write_table(fitted.differentiation_table(), "coefficients.csv", index=False),
        }
        summary_path = self.path("summary.md")
        with open(summary_path, "w", encoding="utf-8") as f:
            f.write(self.render_fit_summary(fitted))
        self.logger.info(f"Wrote {summary_path}")
        written["summary"] = summary_path
        return written

    def write_effects(self, effects: EffectTable, name: str = "effects.csv") -> str:
        return self.write_table(effects.frame, name, index=False)

    def write_predictions(self, predictions: pd.DataFrame, name: str = "predictions.csv") -> str:
        return self.write_table(predictions, name)

    def write_cv_report(self, report: CvReport, name: str = "cv_report.csv") -> List[str]:
        paths = [self.write_table(report.to_frame(), name)]
        flagged = [{"fold": fold, "node_name": node} for fold, nodes in report.flagged.items() for node in nodes]
        if flagged:
            paths.append(self.write_table(pd.DataFrame(flagged), "cv_flagged.csv", index=False))
        return paths
