# Training objectives: contrastive auxiliary loss and Peng's Q(lambda)
