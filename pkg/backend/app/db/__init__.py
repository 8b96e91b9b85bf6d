# Artifact manifest database
