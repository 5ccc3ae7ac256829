"""Trainable parameter counts per component for the desk and full presets."""
from prior_attunet.net import ModelConfig, analytic_param_breakdown, analytic_param_count

for name, cfg in (("desk", ModelConfig.desk()), ("full", ModelConfig.full())):
    total = analytic_param_count(cfg)
    print(f"{name}: {total:,} trainable ({total / 1e6:.2f} M)")
    for part, n in analytic_param_breakdown(cfg).items():
        print(f"  {part:<16}{n:>12,}")
