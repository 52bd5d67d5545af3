# carbseg: carbide segmentation toolkit for two-detector SEM micrographs
