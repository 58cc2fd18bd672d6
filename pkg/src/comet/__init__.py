"""Small-object tracker with IoU/CLE-guided box refinement."""
