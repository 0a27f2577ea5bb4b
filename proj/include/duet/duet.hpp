#pragma once

#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/datagen.hpp"
#include "duet/error.hpp"
#include "duet/evaluate.hpp"
#include "duet/image.hpp"
#include "duet/metrics.hpp"
#include "duet/model.hpp"
#include "duet/objectives.hpp"
#include "duet/optim.hpp"
#include "duet/pipeline.hpp"
#include "duet/quality.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/tokenizer.hpp"
#include "duet/trainer.hpp"
