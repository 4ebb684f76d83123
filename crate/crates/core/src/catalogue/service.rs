use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{CatalogueApi, ListPage, LogicalFileName, ReplicaEntry};
use crate::proto::{Connection, Credentials, Dialer, Frame, Kind, Role, Service, Session};
use crate::{Error, Result};

/// Body of `CAT_REGISTER`: every catalogue mutation travels on this kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CatMutation {
    Register { replica: ReplicaEntry },
    Remove { lfn: LogicalFileName, node_id: String },
}

/// Reply to `CAT_REGISTER`: the replicas left after the mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatMutationAck {
    pub lfn: LogicalFileName,
    pub replicas: Vec<ReplicaEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub lfn: LogicalFileName,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListRequest {
    pub prefix: String,
    pub limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<String>,
}

/// Serves `CAT_*` kinds on top of any [`CatalogueApi`].
pub struct CatalogueService<C> {
    catalogue: C,
}

impl<C: CatalogueApi> CatalogueService<C> {
    pub fn new(catalogue: C) -> Self {
        CatalogueService { catalogue }
    }

    fn check_owner(session: &Session, node_id: &str) -> Result<()> {
        if session.role == Role::Admin || session.node_id == node_id {
            Ok(())
        } else {
            Err(Error::Unauthorized(format!(
                "{} may not modify replicas of {node_id}",
                session.node_id
            )))
        }
    }
}

impl<C: CatalogueApi + 'static> Service for CatalogueService<C> {
    fn handle(&self, session: &Session, frame: Frame) -> Result<Frame> {
        match frame.kind() {
            Kind::CatRegister => {
                let (lfn, replicas) = match frame.parse::<CatMutation>()? {
                    CatMutation::Register { replica } => {
                        Self::check_owner(session, &replica.node_id)?;
                        let lfn = replica.lfn.clone();
                        (lfn, self.catalogue.register(replica)?)
                    }
                    CatMutation::Remove { lfn, node_id } => {
                        Self::check_owner(session, &node_id)?;
                        let left = self.catalogue.remove_replica(&lfn, &node_id)?;
                        let replicas = if left == 0 {
                            Vec::new()
                        } else {
                            self.catalogue.resolve(&lfn)?
                        };
                        (lfn, replicas)
                    }
                };
                Ok(Frame::from_message(
                    Kind::CatRegister,
                    &CatMutationAck { lfn, replicas },
                )?)
            }
            Kind::CatResolve => {
                let req: ResolveRequest = frame.parse()?;
                let replicas = self.catalogue.resolve(&req.lfn)?;
                Ok(Frame::from_message(Kind::CatResolve, &replicas)?)
            }
            Kind::CatList => {
                let req: ListRequest = frame.parse()?;
                let page = self
                    .catalogue
                    .list(&req.prefix, req.limit, req.after.as_deref())?;
                Ok(Frame::from_message(Kind::CatList, &page)?)
            }
            other => Err(Error::malformed(format!(
                "catalogue does not serve {other}"
            ))),
        }
    }
}

/// Remote catalogue reached over the wire. Keeps one authenticated
/// connection and reopens it after a transport failure.
pub struct CatalogueClient {
    dialer: Arc<dyn Dialer>,
    addr: String,
    creds: Credentials,
    conn: Mutex<Option<Connection>>,
}

impl CatalogueClient {
    pub fn new(dialer: Arc<dyn Dialer>, addr: impl Into<String>, creds: Credentials) -> Self {
        CatalogueClient {
            dialer,
            addr: addr.into(),
            creds,
            conn: Mutex::new(None),
        }
    }

    fn call<Req: Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        kind: Kind,
        req: &Req,
    ) -> Result<Resp> {
        let mut guard = self.conn.lock().unwrap();
        for attempt in 0..2 {
            if guard.is_none() {
                *guard = Some(Connection::open(self.dialer.as_ref(), &self.addr, &self.creds)?);
            }
            let conn = guard.as_mut().expect("connection just opened");
            match conn.call(kind, req, kind) {
                Err(e) if e.is_connectivity() && attempt == 0 => {
                    *guard = None;
                }
                other => return other,
            }
        }
        unreachable!("second attempt always returns")
    }
}

impl CatalogueApi for CatalogueClient {
    fn register(&self, replica: ReplicaEntry) -> Result<Vec<ReplicaEntry>> {
        let ack: CatMutationAck = self.call(Kind::CatRegister, &CatMutation::Register { replica })?;
        Ok(ack.replicas)
    }

    fn remove_replica(&self, lfn: &LogicalFileName, node_id: &str) -> Result<usize> {
        let ack: CatMutationAck = self.call(
            Kind::CatRegister,
            &CatMutation::Remove {
                lfn: lfn.clone(),
                node_id: node_id.to_owned(),
            },
        )?;
        Ok(ack.replicas.len())
    }

    fn resolve(&self, lfn: &LogicalFileName) -> Result<Vec<ReplicaEntry>> {
        self.call(Kind::CatResolve, &ResolveRequest { lfn: lfn.clone() })
    }

    fn list(&self, prefix: &str, limit: usize, after: Option<&str>) -> Result<ListPage> {
        self.call(
            Kind::CatList,
            &ListRequest {
                prefix: prefix.to_owned(),
                limit,
                after: after.map(str::to_owned),
            },
        )
    }
}

impl<T: CatalogueApi + ?Sized> CatalogueApi for Arc<T> {
    fn register(&self, replica: ReplicaEntry) -> Result<Vec<ReplicaEntry>> {
        (**self).register(replica)
    }

    fn remove_replica(&self, lfn: &LogicalFileName, node_id: &str) -> Result<usize> {
        (**self).remove_replica(lfn, node_id)
    }

    fn resolve(&self, lfn: &LogicalFileName) -> Result<Vec<ReplicaEntry>> {
        (**self).resolve(lfn)
    }

    fn list(&self, prefix: &str, limit: usize, after: Option<&str>) -> Result<ListPage> {
        (**self).list(prefix, limit, after)
    }
}
