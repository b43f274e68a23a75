
#### GENERAL SETTINGS ####

params = {
    'SYMBOL_RATE_BAUD' : 9600,
    'REAL_DIMS_PER_SYMBOL' : 1, # set to 2 to pair two real dimensions into one complex channel use
    'POSTERIOR_STD_FLOOR' : 1e-4,
    'PRIOR_RIDGE_SCALE' : 1e-4, # epsilon = scale * mean diagonal of the class covariance
    'PRIOR_RIDGE_FLOOR' : 1e-6,
    'MI_DEFAULT_BINS' : 16,
    'DETECTOR_TARGET_TPR' : 0.95,
    'LAMBDA_WARMUP_FRACTION' : 0.1,
    'DEFAULT_LATENT_DIM' : 16,
    'DEFAULT_BATCH_SIZE' : 256,
    'DEFAULT_NOISE_SAMPLES' : 5,
    'DEFAULT_LEARNING_RATE' : 1e-3,
    'DEFAULT_EVAL_REPEATS' : 5,
    'OOD_LABEL' : -1,
    'CSV_FLOAT_FORMAT' : '%.6f',
    'CSV_SCHEMA_VERSION' : 1,
}
