import numpy as np, torch, time
from gensplat.config import RunConfig
from gensplat.model import init_denoiser
from gensplat.training import make_dataset, train_step, make_optimizer, eval_scene
from gensplat.seeding import derive_rng, derive_seed

torch.set_num_threads(1)
cfg = RunConfig()
cfg.scene.n_splats = 48
cfg.train.lr = 3e-4
cfg.train.steps = 1400
model = init_denoiser(cfg.model, seed=derive_seed(cfg.seed, "init"))
t0 = time.time()
bundles = make_dataset(cfg, 32)
eval_bundles = make_dataset(cfg, 2, seed_offset=1000, with_flip=False)
print(f"dataset: {time.time()-t0:.0f}s", flush=True)
opt = make_optimizer(model, cfg)
rng = derive_rng(cfg.seed, "train")
g = torch.Generator().manual_seed(derive_seed(cfg.seed, "train/torch"))
t0 = time.time()
for step in range(cfg.train.steps):
    picks = rng.choice(len(bundles), size=1)
    r = train_step(model, [bundles[picks[0]]], cfg, opt, rng, g)
    if step % 50 == 0 or step == cfg.train.steps - 1:
        print(f"step {step:4d}  l_v {r.l_v:.4f}  l_lr {r.l_lr:.5f}  l_nv {r.l_nv:.5f}  "
              f"({(time.time()-t0)/(step+1):.2f}s/step)", flush=True)
    if step > 0 and step % 350 == 0 or step == cfg.train.steps - 1:
        for i, eb in enumerate(eval_bundles):
            ev = eval_scene(model, eb, cfg, seed=777 + i)
            print(f"  eval scene {i}: psnr {ev['psnr']:.2f}  tsed {ev['tsed']:.2f}", flush=True)
        torch.save(model.state_dict(), "/root/pkg/.pilot/pilot2.pt")
print("done", flush=True)
