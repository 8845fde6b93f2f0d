// SPDX-License-Identifier: Apache-2.0
#pragma once

// Everything in one include.

#include "lmkit/analysis/vocab_analysis.hpp"
#include "lmkit/bench/bench.hpp"
#include "lmkit/corpus/batches.hpp"
#include "lmkit/corpus/corpus.hpp"
#include "lmkit/evaluation/evaluation.hpp"
#include "lmkit/models/config.hpp"
#include "lmkit/models/model.hpp"
#include "lmkit/models/params.hpp"
#include "lmkit/models/recurrence.hpp"
#include "lmkit/numerics/graph.hpp"
#include "lmkit/numerics/ops.hpp"
#include "lmkit/numerics/tensor.hpp"
#include "lmkit/tokenizer/bpe.hpp"
#include "lmkit/tokenizer/vocabulary.hpp"
#include "lmkit/training/training.hpp"
