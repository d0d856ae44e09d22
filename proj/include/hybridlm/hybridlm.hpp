#pragma once

#include "hybridlm/checkpoint.hpp"
#include "hybridlm/corpus.hpp"
#include "hybridlm/error.hpp"
#include "hybridlm/eval.hpp"
#include "hybridlm/generate.hpp"
#include "hybridlm/mask.hpp"
#include "hybridlm/model.hpp"
#include "hybridlm/random.hpp"
#include "hybridlm/tensor.hpp"
#include "hybridlm/tokenizer.hpp"
#include "hybridlm/training.hpp"
