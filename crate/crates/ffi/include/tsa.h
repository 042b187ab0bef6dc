#ifndef TSA_H
#define TSA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsaStatus {
  TSA_STATUS_OK = 0,
  TSA_STATUS_CONFIG_ERROR = 2,
  TSA_STATUS_NUMERICAL_ERROR = 3,
  TSA_STATUS_IO_ERROR = 4,
  TSA_STATUS_NULL_POINTER = 5,
  TSA_STATUS_BUFFER_TOO_SMALL = 6,
  TSA_STATUS_PANIC = 7,
} TsaStatus;

/**
 * A loaded network case.
 */
typedef struct TsaCase TsaCase;

typedef struct TsaMeasurements TsaMeasurements;

/**
 * PMU measurement model, optionally with the slack angle fixed.
 */
typedef struct TsaPmuModel TsaPmuModel;

/**
 * A full bus voltage profile `[v_r; v_i]`.
 */
typedef struct TsaProfile TsaProfile;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *tsa_last_error(void);

/**
 * Loads a case file (either supported text format, chosen by content).
 */
enum TsaStatus tsa_case_load(const char *path, struct TsaCase **out);

void tsa_case_free(struct TsaCase *net);

size_t tsa_case_n_bus(const struct TsaCase *net);

/**
 * Copies the external bus ids, in internal order, into `ids`.
 */
enum TsaStatus tsa_case_bus_ids(const struct TsaCase *net, uint32_t *ids, size_t len);

/**
 * AC power flow with every load scaled by `load_scale`.
 */
enum TsaStatus tsa_power_flow(const struct TsaCase *net,
                              double load_scale,
                              struct TsaProfile **out);

void tsa_profile_free(struct TsaProfile *profile);

/**
 * Writes `[v_r; v_i]` (length 2·n_bus). With `zero_slack`, rotated so the slack angle is 0.
 */
enum TsaStatus tsa_profile_get(const struct TsaCase *net,
                               const struct TsaProfile *profile,
                               bool zero_slack,
                               double *v,
                               size_t len);

/**
 * PMU model for the listed bus ids. With `fix_slack`, the state omits the slack imaginary part.
 */
enum TsaStatus tsa_pmu_model_new(const struct TsaCase *net,
                                 const uint32_t *pmu_bus_ids,
                                 size_t n_pmu,
                                 double sigma_v,
                                 double sigma_i,
                                 bool fix_slack,
                                 struct TsaPmuModel **out);

void tsa_pmu_model_free(struct TsaPmuModel *model);

/**
 * Length of the state vectors this model takes and returns.
 */
size_t tsa_pmu_model_n_state(const struct TsaPmuModel *model);

size_t tsa_pmu_model_n_pmu(const struct TsaPmuModel *model);

/**
 * Maps a full `[v_r; v_i]` vector into the model's state.
 */
enum TsaStatus tsa_pmu_model_reduce_state(const struct TsaPmuModel *model,
                                          const double *v_full,
                                          size_t len,
                                          double *x,
                                          size_t x_len);

/**
 * Simulates noisy PMU data for state `x`, with offsets (degrees) at the given buses.
 */
enum TsaStatus tsa_simulate(const struct TsaPmuModel *model,
                            const double *x,
                            size_t x_len,
                            const uint32_t *attack_bus_ids,
                            const double *attack_deg,
                            size_t n_attack,
                            uint64_t seed,
                            struct TsaMeasurements **out);

/**
 * Parses a measurement set from its JSON form.
 */
enum TsaStatus tsa_measurements_from_json(const char *json, struct TsaMeasurements **out);

void tsa_measurements_free(struct TsaMeasurements *z);

/**
 * Attack-unaware weighted least squares; writes `n_state` values.
 */
enum TsaStatus tsa_estimate_ml(const struct TsaPmuModel *model,
                               const struct TsaMeasurements *z,
                               double *x_hat,
                               size_t len);

/**
 * Alternating minimization. Writes the state and one offset per PMU (degrees, PMU bus order).
 */
enum TsaStatus tsa_run_am(const struct TsaPmuModel *model,
                          const struct TsaMeasurements *z,
                          double tolerance,
                          size_t max_iterations,
                          double *x_hat,
                          size_t x_len,
                          double *delta_theta_deg,
                          size_t n_pmu,
                          size_t *iterations);

/**
 * Exhaustive search for the `n_p` PMUs whose spoofing (within ±`bound_deg`) biases
 * the estimate most. `profile` is the operating point; the model must not fix the slack.
 */
enum TsaStatus tsa_vuln_optimal(const struct TsaPmuModel *model,
                                const struct TsaProfile *profile,
                                size_t n_p,
                                double bound_deg,
                                uint32_t *bus_ids,
                                double *delta_theta_deg,
                                size_t len,
                                double *objective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSA_H */
