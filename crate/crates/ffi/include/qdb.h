#ifndef QDB_H
#define QDB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Nonzero values match the broker's wire
 * error codes.
 */
typedef enum QdbStatus {
  QDB_STATUS_OK = 0,
  QDB_STATUS_NOT_FOUND = 1,
  QDB_STATUS_EXISTS = 2,
  QDB_STATUS_UNAVAILABLE = 3,
  QDB_STATUS_TIMEOUT = 4,
  QDB_STATUS_USAGE = 5,
  QDB_STATUS_INTERNAL = 6,
} QdbStatus;

/**
 * An open engine.
 */
typedef struct QdbEngine QdbEngine;

/**
 * A dequeued message.
 */
typedef struct QdbMessage QdbMessage;

/**
 * An active transaction. Commit and abort consume it.
 */
typedef struct QdbTxn QdbTxn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer
 * stays valid until the next failing call on this thread.
 */
const char *qdb_last_error(void);

/**
 * Opens (or creates) an engine in `dir`, or an in-memory engine when `dir`
 * is null.
 *
 * # Safety
 * `dir` must be null or a valid string; `out` must be writable.
 */
enum QdbStatus qdb_open(const char *dir, struct QdbEngine **out);

/**
 * Checkpoints, stops pools and frees the handle. Null is ignored.
 *
 * # Safety
 * `engine` must come from `qdb_open` and not be used afterwards.
 */
enum QdbStatus qdb_close(struct QdbEngine *engine);

/**
 * # Safety
 * `engine` must be a live handle and `name` a valid string.
 */
enum QdbStatus qdb_create_queue(const struct QdbEngine *engine,
                                const char *name,
                                bool durable,
                                bool priority_ordering);

/**
 * # Safety
 * `engine` must be a live handle and `name` a valid string.
 */
enum QdbStatus qdb_destroy_queue(const struct QdbEngine *engine, const char *name);

/**
 * # Safety
 * `engine` must be a live handle; `out` must be writable.
 */
enum QdbStatus qdb_begin(const struct QdbEngine *engine, struct QdbTxn **out);

/**
 * Commits and frees the transaction, whatever the outcome.
 *
 * # Safety
 * `txn` must come from `qdb_begin` and not be used afterwards.
 */
enum QdbStatus qdb_commit(struct QdbTxn *txn);

/**
 * Aborts and frees the transaction.
 *
 * # Safety
 * `txn` must come from `qdb_begin` and not be used afterwards.
 */
enum QdbStatus qdb_abort(struct QdbTxn *txn);

/**
 * Enqueues inside `txn`. `out_id` may be null.
 *
 * # Safety
 * `txn` must be live, `queue` a valid string, `data` valid for `len`
 * bytes.
 */
enum QdbStatus qdb_txn_enqueue(struct QdbTxn *txn,
                               const char *queue,
                               int64_t priority,
                               const uint8_t *data,
                               uintptr_t len,
                               uint64_t *out_id);

/**
 * Dequeues inside `txn`. `*out` is set to null when nothing became
 * available within `wait_ms`. `isolation`: 0 read past, 1 serializable.
 *
 * # Safety
 * `txn` must be live, `queue` a valid string, `out` writable.
 */
enum QdbStatus qdb_txn_dequeue(struct QdbTxn *txn,
                               const char *queue,
                               uint8_t isolation_mode,
                               uint32_t wait_ms,
                               struct QdbMessage **out);

/**
 * Enqueue in a transaction of its own.
 *
 * # Safety
 * As `qdb_txn_enqueue`, with a live `engine`.
 */
enum QdbStatus qdb_enqueue(const struct QdbEngine *engine,
                           const char *queue,
                           int64_t priority,
                           const uint8_t *data,
                           uintptr_t len,
                           uint64_t *out_id);

/**
 * Dequeue in a transaction of its own.
 *
 * # Safety
 * As `qdb_txn_dequeue`, with a live `engine`.
 */
enum QdbStatus qdb_dequeue(const struct QdbEngine *engine,
                           const char *queue,
                           uint8_t isolation_mode,
                           uint32_t wait_ms,
                           struct QdbMessage **out);

/**
 * # Safety
 * `msg` must be a live message handle.
 */
uint64_t qdb_message_id(const struct QdbMessage *msg);

/**
 * # Safety
 * `msg` must be a live message handle.
 */
int64_t qdb_message_priority(const struct QdbMessage *msg);

/**
 * Payload bytes, valid until the message is freed.
 *
 * # Safety
 * `msg` must be a live message handle; `len` must be writable.
 */
const uint8_t *qdb_message_payload(const struct QdbMessage *msg, uintptr_t *len);

/**
 * # Safety
 * `msg` must come from a dequeue call and not be used afterwards.
 */
void qdb_message_free(struct QdbMessage *msg);

/**
 * # Safety
 * `engine` must be live; `out_lsn` may be null.
 */
enum QdbStatus qdb_checkpoint(const struct QdbEngine *engine, uint64_t *out_lsn);

/**
 * Statistics as JSON: the whole engine when `queue` is null, else one
 * queue. Free the result with `qdb_string_free`.
 *
 * # Safety
 * `engine` must be live, `queue` null or a valid string, `out` writable.
 */
enum QdbStatus qdb_stats_json(const struct QdbEngine *engine, const char *queue, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void qdb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QDB_H */
