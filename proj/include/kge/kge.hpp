#pragma once

#include "kge/error.hpp"
#include "kge/evaluator.hpp"
#include "kge/geometry.hpp"
#include "kge/graph_store.hpp"
#include "kge/models.hpp"
#include "kge/objectives.hpp"
#include "kge/rng.hpp"
#include "kge/trainer.hpp"
