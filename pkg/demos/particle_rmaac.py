"""Train RMAAC and a non-robust baseline on cooperative navigation, then
evaluate both with and without the learned observation attack.

A full run (2000 episodes each) takes a few minutes; pass a smaller episode
count as the first argument for a quick look.

    python3 demos/particle_rmaac.py 300
"""
import sys

from mgspa.attacks import AttackSpec
from mgspa.envs import make_env
from mgspa.harness import evaluate_env
from mgspa.rmaac import RmaacConfig, train_rmaac

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
env = make_env("particle-nav")

robust, curve, _ = train_rmaac(env, RmaacConfig(episodes=episodes), seed=0, log_every=max(1, episodes // 10))
baseline, _, _ = train_rmaac(env, RmaacConfig(episodes=episodes, adversary=False), seed=0)
print(f"final training reward (RMAAC): {curve[-1]['mean_episode_reward']:.2f}")

for label, spec in (("no attack", AttackSpec("none")), ("learned attack", AttackSpec("f1", epsilon=0.5))):
    for name, bundle in (("RMAAC", robust), ("baseline", baseline)):
        stats = evaluate_env(env, bundle, spec, robust.adversaries, episodes=100, seed=123)
        print(f"{label:>15} {name:>9}: {stats.mean_episode_reward:8.2f} +- {stats.reward_variance ** 0.5:.2f}")
