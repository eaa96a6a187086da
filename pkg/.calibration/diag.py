import sys, time
import numpy as np
from brivl.config import RunConfig
from brivl.contrastive import Trainer
from brivl import datagen, evaluation
from brivl.vocab import batch_tokenize
from brivl.autodiff import Tensor, no_grad

mode, lr, epochs, tag = sys.argv[1], float(sys.argv[2]), int(sys.argv[3]), sys.argv[4]
train_ds = datagen.generate_dataset(101, 2000, split="train")
test_ds = datagen.generate_dataset(202, 200, split="test")
images, texts, _ = datagen.load_arrays(train_ds)
cfg = RunConfig(loss_mode=mode, lr=lr, epochs=epochs)
tr = Trainer(cfg)
tokens = batch_tokenize(texts, cfg.max_text_len)
for epoch in range(cfg.epochs):
    ms = []
    tr.run_epoch(images, tokens.ids, tokens.lengths, on_metrics=lambda m: ms.append(m))
    real = [m.loss_total for m in ms if m.loss_total == m.loss_total]
    if (epoch+1) % 3 == 0 or epoch == cfg.epochs-1:
        print(f"[{tag}] epoch {epoch+1}: loss {sum(real)/len(real):.4f}", flush=True)

ti, tt, ts = datagen.load_arrays(test_ds)
with no_grad():
    img_emb = np.concatenate([tr.image_encoder(Tensor(ti[i:i+64])).data for i in range(0, 200, 64)])
    txt_emb = tr.text_encoder(batch_tokenize(tt, cfg.max_text_len)).data
r_i2t, r_t2i = evaluation.retrieval_eval(img_emb, txt_emb, evaluation.identity_truth(200), evaluation.identity_truth(200))
idx, labels = datagen.single_shape_labels(test_ds)
with no_grad():
    item_emb = np.concatenate([tr.image_encoder(Tensor(ti[np.asarray(idx)][i:i+64])).data for i in range(0, len(idx), 64)])
zs = evaluation.zero_shot_classify(item_emb, labels, ["circle","square","triangle"], lambda names: tr.text_encoder.encode_texts(names).data)
print(f"[{tag}] i2t@1={r_i2t.recall_at[1]} t2i@1={r_t2i.recall_at[1]} sum={r_i2t.recall_sum:.1f} zs={zs.overall_accuracy:.1f}%", flush=True)
