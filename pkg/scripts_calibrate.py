import time
import numpy as np
from slmrec.data import generate_synthetic, build_dataset
from slmrec.model import DecoderModel, ModelConfig
from slmrec.training import TrainSettings, pretrain_id_embeddings, train_model
from slmrec.metrics import evaluate_model
from slmrec.distill import DistillConfig, distill_offline

t0 = time.time()
records = generate_synthetic(n_users=2000, n_items=500, seed=7)
split = build_dataset(records)
print("corpus:", split.stats(), flush=True)

NEG = 399
t1 = time.time()
table, base_valid, base_test = pretrain_id_embeddings(
    split, seq_len=50, id_dim=64, n_layers=2, heads=2,
    settings=TrainSettings(max_steps=200, batch_size=128, lr=3e-3, warmup_steps=20,
                           eval_steps=200, eval_negatives=NEG, eval_batch_size=256),
    seed=0,
)
print(f"baseline: valid MRR {base_valid.mrr:.4f} test {base_test.mrr:.4f} "
      f"({time.time()-t1:.0f}s)", flush=True)

settings = TrainSettings(batch_size=64, max_steps=300, lr=1e-3, warmup_steps=30,
                         eval_steps=100, eval_negatives=NEG, eval_batch_size=256, seed=0)

t1 = time.time()
teacher_cfg = ModelConfig(n_items=split.n_items, n_layers=8)
teacher = DecoderModel.init(teacher_cfg, seed=0, id_embedding=table)
tr = train_model(teacher, split, settings)
t_valid = tr.eval_reports[tr.best_step]
t_test = evaluate_model(teacher, split, "test", seed=17, negatives=NEG)
print(f"teacher(8L): best step {tr.best_step} valid MRR {t_valid.mrr:.4f} "
      f"test {t_test.mrr:.4f} step {tr.avg_step_s*1e3:.0f}ms ({time.time()-t1:.0f}s)",
      flush=True)

t1 = time.time()
student_cfg = teacher_cfg.with_layers(4)
plain = DecoderModel.init(student_cfg, seed=0, id_embedding=table)
pr = train_model(plain, split, settings)
p_valid = pr.eval_reports[pr.best_step]
print(f"plain(4L):  best step {pr.best_step} valid MRR {p_valid.mrr:.4f} "
      f"step {pr.avg_step_s*1e3:.0f}ms ({time.time()-t1:.0f}s)", flush=True)

t1 = time.time()
dcfg = DistillConfig(blocks=4, lam_cos=1.0, lam_norm=0.1, lam_ms=1.0)
student, distiller, dr = distill_offline(teacher, student_cfg, split, dcfg, settings,
                                         id_embedding=table)
d_valid = dr.eval_reports[dr.best_step]
print(f"distilled:  best step {dr.best_step} valid MRR {d_valid.mrr:.4f} "
      f"step {dr.avg_step_s*1e3:.0f}ms setup {dr.setup_s:.0f}s ({time.time()-t1:.0f}s)",
      flush=True)
print(f"KD gap: {(d_valid.mrr - p_valid.mrr) / p_valid.mrr * 100:+.1f}%", flush=True)
print("total:", round(time.time()-t0), "s")
