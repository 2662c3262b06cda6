#pragma once

#include "persrec/common.hpp"
#include "persrec/costmodel.hpp"
#include "persrec/datakit.hpp"
#include "persrec/evalkit.hpp"
#include "persrec/expertlens.hpp"
#include "persrec/inference.hpp"
#include "persrec/manifest.hpp"
#include "persrec/maskgen.hpp"
#include "persrec/seqcore.hpp"
#include "persrec/tinyformer.hpp"
#include "persrec/trainer.hpp"
