#!/usr/bin/env python3
"""
Console report templates for navnet
"""

GEN_DATA_REPORT = """
Dataset written to {out}
  maps:         {maps} ({train_maps} train / {test_maps} test)
  trajectories: {trajectories}
  samples:      {train_samples} train / {test_samples} test
  manifest:     sha256 {digest}
"""

TRAIN_REPORT = """
Trained {arch_id} for {epochs} epochs (best epoch {best_epoch})
  loss:         {loss:.4f}
  accuracy:     {train_acc:.4f} train / {test_acc:.4f} test
  success rate: {train_succ} train / {test_succ} test
  run dir:      {out}
"""

EVAL_REPORT = """
Evaluation of {source}
  step accuracy: {train_acc:.4f} train / {test_acc:.4f} test
  success rate:  {train_succ:.4f} train / {test_succ:.4f} test
"""

VALUE_CONTRAST_REPORT = "  value map:     goal neighbours lighter than risky cells on {lighter} of {maps} test maps"

BENCH_REPORT = """
Seconds per epoch ({samples} samples, batch {batch_size})
  dbnet:        {dbnet:.2f}
  vin (K={k}):  {vin:.2f}
  ratio:        {ratio:.3f}  ({reduction:.1f}% less time for dbnet)
"""

GRADCHECK_ROW = "  {status:4s}  {name:<24s} max rel err {error:.3e}"

GRADCHECK_WORST = "        {tensor}[{index}] analytic={analytic:.6e} numeric={numeric:.6e} rel={error:.3e}"

COMPARISON_HEADER = "{arch:<8s} {train_acc:>9s} {test_acc:>9s} {train_succ:>10s} {test_succ:>10s} {seconds:>9s} {lighter:>8s}"

COMPARISON_ROW = "{arch:<8s} {train_acc:>9.4f} {test_acc:>9.4f} {train_succ:>10.4f} {test_succ:>10.4f} {seconds:>9s} {lighter:>8s}"


def format_rate(value) -> str:
    """Four decimals, or n/a when missing"""
    return "n/a" if value is None else f"{value:.4f}"
