# Pipelines package initialization
