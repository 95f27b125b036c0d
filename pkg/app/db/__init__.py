# On-disk stores: cohort payloads/groupings and model checkpoints
