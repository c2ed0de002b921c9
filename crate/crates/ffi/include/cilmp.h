#ifndef CILMP_H
#define CILMP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CilmpStatus {
  CILMP_STATUS_OK = 0,
  CILMP_STATUS_NULL_POINTER = 1,
  CILMP_STATUS_INVALID_UTF8 = 2,
  CILMP_STATUS_CONFIG = 3,
  CILMP_STATUS_FORMAT = 4,
  CILMP_STATUS_NUMERICAL = 5,
  CILMP_STATUS_DIMENSION = 6,
  CILMP_STATUS_IO = 7,
  CILMP_STATUS_BUFFER_TOO_SMALL = 8,
  CILMP_STATUS_OTHER = 9,
  CILMP_STATUS_PANIC = 10,
} CilmpStatus;

// Opaque concept bank.
typedef struct CilmpBank CilmpBank;

// Opaque experiment configuration.
typedef struct CilmpConfig CilmpConfig;

// Opaque trained run: its report and the tuned model.
typedef struct CilmpRun CilmpRun;

// Test metrics of one run.
typedef struct CilmpMetrics {
  double accuracy;
  double macro_f1;
  double macro_auc;
  double kappa;
} CilmpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cilmp_version(void);

// Message of the last failed call on this thread, with the sizing rules of
// the other string getters. An empty string after a successful call.
enum CilmpStatus cilmp_last_error(char *buf, size_t len, size_t *needed);

// Default configuration.
enum CilmpStatus cilmp_config_default(struct CilmpConfig **out);

// Configuration from JSON; omitted fields take their defaults.
enum CilmpStatus cilmp_config_from_json(const char *json, struct CilmpConfig **out);

enum CilmpStatus cilmp_config_set_seed(struct CilmpConfig *cfg, uint64_t seed);

// `mode` is one of `cilmp`, `no_rd`, `no_conditional`, `no_intervention`,
// `coop_baseline`, `text_mode`.
enum CilmpStatus cilmp_config_set_mode(struct CilmpConfig *cfg, const char *mode);

// The configuration as JSON.
enum CilmpStatus cilmp_config_to_json(const struct CilmpConfig *cfg,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

void cilmp_config_free(struct CilmpConfig *cfg);

// Pretrains, freezes and tunes a model for `cfg`.
enum CilmpStatus cilmp_train(const struct CilmpConfig *cfg, struct CilmpRun **out);

enum CilmpStatus cilmp_run_metrics(const struct CilmpRun *run, struct CilmpMetrics *out);

enum CilmpStatus cilmp_run_trainable_params(const struct CilmpRun *run, size_t *out);

// The run report as JSON.
enum CilmpStatus cilmp_run_report_json(const struct CilmpRun *run,
                                       char *buf,
                                       size_t len,
                                       size_t *needed);

enum CilmpStatus cilmp_run_save_checkpoint(const struct CilmpRun *run, const char *path);

void cilmp_run_free(struct CilmpRun *run);

// Restores a checkpoint and evaluates it on the test split of its world.
enum CilmpStatus cilmp_checkpoint_eval(const char *path, struct CilmpMetrics *out);

// The concept bank of the world described by `cfg`.
enum CilmpStatus cilmp_bank_generate(const struct CilmpConfig *cfg, struct CilmpBank **out);

enum CilmpStatus cilmp_bank_load(const char *path, struct CilmpBank **out);

enum CilmpStatus cilmp_bank_save(const struct CilmpBank *bank, const char *path);

// Number of classes, layers and the width of a bank; any out pointer may
// be null.
enum CilmpStatus cilmp_bank_shape(const struct CilmpBank *bank,
                                  size_t *classes,
                                  size_t *seq_len,
                                  size_t *width);

// Layer-to-layer CKA of one class, row-major into `out` of `len` values,
// which must hold `seq_len²`.
enum CilmpStatus cilmp_bank_cka(const struct CilmpBank *bank,
                                size_t class_index,
                                double *out,
                                size_t len);

void cilmp_bank_free(struct CilmpBank *bank);

// Metrics of `n` samples over `classes` classes from integer labels and a
// row-major `n × classes` score matrix.
enum CilmpStatus cilmp_metrics_evaluate(const size_t *labels,
                                        const double *scores,
                                        size_t n,
                                        size_t classes,
                                        struct CilmpMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CILMP_H */
