# Taxonomies, datasets and the tensor engine shared by every package.
