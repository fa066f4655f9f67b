/* C interface for the synre relation extractor.
 *
 * Handles are opaque; create and free them through this API only.
 * Fallible calls return a status code; synre_last_error() exposes the
 * message behind the most recent failure on the calling thread.
 *
 * Keep in sync with crates/ffi/src/lib.rs.
 */

#ifndef SYNRE_H
#define SYNRE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define SYNRE_OK 0
#define SYNRE_ERR_USAGE 1
#define SYNRE_ERR_DATA 2
#define SYNRE_ERR_NUMERIC 3

typedef struct SynreModel SynreModel;
typedef struct SynreDataset SynreDataset;

/* Library version as a static NUL-terminated string. */
const char *synre_version(void);

/* Message of the most recent failure on this thread; valid until the
 * next failing call on the same thread. */
const char *synre_last_error(void);

/* Load a trained checkpoint. On success writes a handle to `out`. */
int synre_model_load(const char *path, SynreModel **out);

void synre_model_free(SynreModel *model);

/* Number of relations in the model inventory, or -1 on null. */
int synre_model_num_relations(const SynreModel *model);

/* Copy the NUL-terminated name of relation `index` into `buf` (at most
 * `cap` bytes including the terminator). Returns the bytes written
 * excluding the terminator, or -1 on bad arguments. */
int synre_model_relation_name(const SynreModel *model, int index, char *buf,
                              size_t cap);

/* Load a corpus in the JSONL format. With a NULL `relations_path` the
 * relation inventory is collected from the file; otherwise it is read
 * from the given file and unknown relations are rejected. */
int synre_dataset_load(const char *corpus_path, const char *relations_path,
                       SynreDataset **out);

void synre_dataset_free(SynreDataset *dataset);

/* Number of bags in a dataset, or -1 on null. */
int synre_dataset_num_bags(const SynreDataset *dataset);

/* Relation probabilities for one bag. `probs` must hold exactly
 * synre_model_num_relations(model) doubles; they sum to one. */
int synre_predict_bag(const SynreModel *model, const SynreDataset *dataset,
                      size_t bag_index, double *probs, size_t len);

/* Train a model end to end, writing checkpoints and the training log
 * into `out_dir` exactly like the CLI `train` subcommand. `config_json`
 * (nullable) is a JSON training-configuration file, `strategy`
 * (nullable: "baseline", "cat" or "trans") overrides its strategy. */
int synre_train(const char *corpus_path, const char *relations_path,
                const char *config_json, const char *strategy, uint64_t seed,
                const char *out_dir);

#ifdef __cplusplus
}
#endif

#endif /* SYNRE_H */
