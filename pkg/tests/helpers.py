"""Tiny run configurations that train in seconds."""
from sgdiff.training import RunConfig

TINY_MODEL = dict(base_dim=8, heads=2, d_cond=8, d_text=8, text_heads=2, d_graph=8, text_layers=1,
                  graph_layers=1, sample_steps=3)


def tiny_config(out_dir, **kw) -> RunConfig:
    base = dict(seed=0, n_train=12, n_heldout=4, model=dict(TINY_MODEL), steps=4, batch_size=4,
                warmup_steps=2, gcn_pretrain_steps=3, out_dir=str(out_dir))
    base.update(kw)
    return RunConfig(**base)
