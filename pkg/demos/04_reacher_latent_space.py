"""
Reaching: one-shot imitation and a walk through the embedding space
===================================================================

Trains a small trajectory VAE on reaching demonstrations, imitates held-out
demonstrations from their embeddings, then interpolates between two
embeddings and watches the end point slide along the segment.  About a
minute on one core; the full-size run lands much closer to the demos.
"""

import numpy as np

from diverse_imitation import envs, vae
from diverse_imitation.cli import segment_deviation
from diverse_imitation.config import rng_stream

data_cfg = envs.DatasetConfig(kind="reacher", train_targets=30, rollouts=3, test_targets=4, test_rollouts=1)
train, test = envs.generate_dataset(data_cfg, rng_stream(0, "dataset"))
env = envs.ReacherEnv()
print(len(train), "train and", len(test), "held-out trajectories")

specs = vae.VaeSpecs(obs_dim=env.obs_dim, action_dim=env.action_dim, latent_dim=16, encoder_width=32,
                     action_sizes=(32, 32), channels=8, wavenet_layers=2, mixture_components=3)
res = vae.train_vae(train, specs, vae.VaeTrainConfig(epochs=150, batch_size=4), rng_stream(0, "training"), env.observe)
print("loss: first epoch %.1f, last epoch %.1f" % (res.loss_log[0], res.loss_log[-1]))

Z, _ = vae.posterior(res.params, specs, test, env.observe)
X0 = np.stack([d.states[0] for d in test])
rng = rng_stream(0, "eval")
S, _ = vae.imitate_batch(res.params, specs, env, Z, X0, test[0].T, rng)
for d, s in zip(test, S):
    print("target", np.round(d.meta["task"], 2), "demo end", np.round(d.states[-1, :2], 2),
          "imitation end", np.round(s[-1, :2], 2))

# interpolate between the first two held-out experts
i, j = 0, 1
alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
zs = np.stack(vae.interpolate_embeddings(Z[i], Z[j], alphas))
S, _ = vae.imitate_batch(res.params, specs, env, zs, np.tile(X0[i], (5, 1)), test[0].T, rng)
dev = segment_deviation(test[i].states[-1, :2], test[j].states[-1, :2], S[:, -1, :2])
print("\nalpha  end point       deviation / segment length")
for a, s, d in zip(alphas, S, dev):
    print(f"{a:4.2f}   {np.round(s[-1, :2], 3)}   {d:.3f}")
