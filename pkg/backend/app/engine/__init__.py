# Processing engines: world, encoders, prompts, aligner, policy, evaluation
