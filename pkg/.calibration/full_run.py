import json, time
import numpy as np
from brivl.config import RunConfig
from brivl.contrastive import Trainer
from brivl import datagen, evaluation
from brivl.vocab import batch_tokenize
from brivl.checkpoint import save_trainer

t_start = time.monotonic()
train_ds = datagen.generate_dataset(101, 2000, split="train")
test_ds = datagen.generate_dataset(202, 200, split="test")
images, texts, _ = datagen.load_arrays(train_ds)
cfg = RunConfig()  # desk defaults: d=64 Nb=32 Nq=512 tau=0.07 m=0.99 15 epochs lr=1e-3
tr = Trainer(cfg)
tokens = batch_tokenize(texts, cfg.max_text_len)
losses = []
for epoch in range(cfg.epochs):
    lines = []
    tr.run_epoch(images, tokens.ids, tokens.lengths, on_metrics=lambda m: lines.append(m))
    real = [m.loss_total for m in lines if m.loss_total == m.loss_total]
    losses.append(sum(real)/len(real) if real else float("nan"))
    print(f"epoch {epoch+1}: mean loss {losses[-1]:.4f}", flush=True)
train_time = time.monotonic() - t_start
save_trainer("/root/pkg/.calibration/model_queue.ckpt", tr)

ti, tt, ts = datagen.load_arrays(test_ds)
from brivl.autodiff import Tensor, no_grad
with no_grad():
    img_emb = np.concatenate([tr.image_encoder(Tensor(ti[i:i+64])).data for i in range(0, 200, 64)])
    txt_emb = tr.text_encoder(batch_tokenize(tt, cfg.max_text_len)).data
r_i2t, r_t2i = evaluation.retrieval_eval(img_emb, txt_emb, evaluation.identity_truth(200), evaluation.identity_truth(200))
print("i2t:", r_i2t.recall_at, "t2i:", r_t2i.recall_at, "sum:", r_i2t.recall_sum, flush=True)

idx, labels = datagen.single_shape_labels(test_ds)
with no_grad():
    item_emb = np.concatenate([tr.image_encoder(Tensor(ti[np.asarray(idx)][i:i+64])).data for i in range(0, len(idx), 64)])
    def enc_texts(names):
        return tr.text_encoder.encode_texts(names).data
zs = evaluation.zero_shot_classify(item_emb, labels, ["circle", "square", "triangle"], enc_texts)
print(f"zero-shot over {len(idx)} items: {zs.overall_accuracy:.1f}%", flush=True)
print(json.dumps({"train_minutes": train_time/60, "i2t@1": r_i2t.recall_at[1], "t2i@1": r_t2i.recall_at[1], "recall_sum": r_i2t.recall_sum, "zeroshot": zs.overall_accuracy}))
