/* C ABI for the hemadyn platelet forecasting library.
 *
 * Maintained by hand; mirrors the `extern "C"` items in src/lib.rs.
 *
 * Conventions:
 *  - fallible calls return an error code (HEMADYN_OK == 0) and write
 *    results through out-pointers,
 *  - objects are opaque handles freed with the matching *_free function,
 *  - the last error message is per thread, see hemadyn_last_error_message.
 */

#ifndef HEMADYN_H
#define HEMADYN_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Error codes. */
#define HEMADYN_OK 0
#define HEMADYN_ERR_NULL 1    /* null pointer argument */
#define HEMADYN_ERR_UTF8 2    /* string argument is not valid UTF-8 */
#define HEMADYN_ERR_INVALID 3 /* invalid input (ids, shapes, domains) */
#define HEMADYN_ERR_NUMERIC 4 /* integration or numeric failure */
#define HEMADYN_ERR_BUFFER 5  /* output buffer too small */

/* Opaque handles. */
typedef struct HemadynSchedule HemadynSchedule;
typedef struct HemadynTrajectory HemadynTrajectory;

/* Copies the calling thread's last error message into buf (NUL terminated,
 * truncated to len bytes). Returns the full message length. buf may be
 * NULL to query the length. */
size_t hemadyn_last_error_message(char *buf, size_t len);

/* Builds a treatment schedule from n_events (event_days[i], event_doses[i])
 * pairs, n_cycles cycle start days and a nominal cycle length of 14 or 21
 * days. On success writes a handle to *out. */
int32_t hemadyn_schedule_new(const int64_t *event_days,
                             const double *event_doses, size_t n_events,
                             const int64_t *cycle_starts, size_t n_cycles,
                             int64_t cycle_length, HemadynSchedule **out);

void hemadyn_schedule_free(HemadynSchedule *handle);

/* Simulates a mechanistic model ("friberg", "henrich", "ms", "ms-rev") at
 * population parameters over `days` days (must cover the last treatment
 * event) and writes a trajectory handle to *out. */
int32_t hemadyn_simulate(const char *model_id, const HemadynSchedule *schedule,
                         int64_t days, HemadynTrajectory **out);

/* Number of daily rows (days + 1 for a simulation over `days` days). */
size_t hemadyn_trajectory_len(const HemadynTrajectory *handle);

/* Copies the observable platelet series (counts per liter, one value per
 * day) into out, which must hold at least hemadyn_trajectory_len values. */
int32_t hemadyn_trajectory_observable(const HemadynTrajectory *handle,
                                      double *out, size_t len);

void hemadyn_trajectory_free(HemadynTrajectory *handle);

/* Smoothed MSE of n_obs observations (obs_days[i], obs_values[i]) against
 * pred_len daily predictions starting at day pred_t0; each observation is
 * also compared against the predictions of its neighboring days, weighted
 * by neighbor_weight. */
int32_t hemadyn_smse(const int64_t *obs_days, const double *obs_values,
                     size_t n_obs, int64_t pred_t0, const double *pred,
                     size_t pred_len, double neighbor_weight, double *out);

#ifdef __cplusplus
}
#endif

#endif /* HEMADYN_H */
