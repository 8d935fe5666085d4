#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sscan/common.hpp"

namespace sscan {

enum class TaskKind { SelectiveCopying, VanillaCopying, InductionHeads };

const char* task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// Synthetic-task definition. seq_len is the context length L; copying tasks
// append the answer region so the emitted sequences are longer (see
// task_total_len). Vocabulary layout, from the top: noise = vocab-1,
// delimiter = vocab-2, induction marker = vocab-3; ids below vocab-3 form
// the data alphabet.
struct TaskSpec {
  TaskKind kind = TaskKind::SelectiveCopying;
  index_t seq_len = 256;
  index_t vocab = 16;
  index_t n_memorize = 8;  // K, copying tasks only
  std::uint64_t seed = 0;

  index_t noise_token() const { return vocab - 1; }
  index_t delimiter_token() const { return vocab - 2; }
  index_t induction_token() const { return vocab - 3; }
  index_t data_alphabet() const { return vocab - 3; }

  void validate() const;
};

// Total emitted sequence length: L + K for copying (delimiter slot plus K-1
// teacher-forced answer inputs), L for induction heads.
index_t task_total_len(const TaskSpec& spec);

// One generated batch. targets[i] is the supervised label for position i
// (the model's prediction at i), mask marks the supervised positions:
// the K answer slots for copying, the single query slot for induction.
struct TaskBatch {
  index_t batch = 0, len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};

// Pure function of (spec, batch_index): the same arguments produce the same
// batch on every platform.
TaskBatch generate_batch(const TaskSpec& spec, index_t batch_size,
                         std::uint64_t batch_index,
                         index_t override_len = 0);

// Newline-delimited dump: space-separated token ids, a tab, then the masked
// targets in order.
void dump_batch(const TaskBatch& batch, const std::string& path);

}  // namespace sscan
