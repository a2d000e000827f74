# Simulated distributed agent: actors, batched inference, learner, evaluator
